"""Command-line entry point: synth, train, eval, ablate, heatmap, gradcheck.

Configuration is a flat ``key=value`` file (``--config``) overridden by
``--key value`` flags. Every command writes the resolved configuration to
``<out>/resolved_config.txt``; feeding that file back reproduces the run.

Exit codes: 0 ok, 2 config, 3 I/O, 4 divergence, 5 checkpoint/manifest
mismatch, 6 gradient check failure.
"""
from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import numerics as nx
from .episodes import (
    EpisodeSpec,
    ImageStore,
    SynthConfig,
    TrainConfig,
    evaluate_model,
    load_manifest,
    synth_generate,
    train,
)
from .episodes.images import read_pnm, resize, upscale_nearest, write_pgm_ascii
from .episodes.training import DivergenceError, format_trace
from .errors import CheckpointError, ConfigError, LFSError, ManifestError, SamplingError
from .model import FewShotModel, ModelConfig

log = logging.getLogger("lfs_fewshot")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_DIVERGED, EXIT_MISMATCH, EXIT_GRADCHECK = 0, 2, 3, 4, 5, 6
ABLATION_MODES = ("self", "local", "select", "lfs")
RESOLVED_NAME = "resolved_config.txt"


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def _registry() -> dict[str, tuple[type, object]]:
    keys: dict[str, tuple[type, object]] = {}
    for f in dataclasses.fields(ModelConfig):
        keys[f.name] = (type(f.default), f.default)
    for f in dataclasses.fields(TrainConfig):
        if f.name != "seed":
            keys[f.name] = (type(f.default), f.default)
    keys.update({
        "seed": (int, 0),
        "way": (int, 5), "shot": (int, 5), "query": (int, 15),
        "n_tasks": (int, 200), "split": (str, "test"), "workers": (int, 1),
        "classes": (int, 20), "per_class": (int, 30), "size": (int, 32),
        "fg_fraction": (float, 0.2), "clutter_level": (float, 0.5),
        "ablate_ratios": (str, "0.1,0.3,0.5,0.7,0.9,1.0"),
        "gradcheck_entries": (int, 64), "gradcheck_h": (float, 1e-4),
        "manifest": (str, ""), "checkpoint": (str, ""), "image": (str, ""), "out": (str, "out"),
    })
    return keys


KEYS = _registry()


def _convert(key: str, raw: str):
    kind = KEYS[key][0]
    try:
        return _parse_bool(raw) if kind is bool else kind(raw.strip())
    except ValueError as exc:
        raise ConfigError(f"bad value for {key}: {exc}") from None


def read_config_file(path: str | Path) -> dict[str, str]:
    out: dict[str, str] = {}
    for lineno, line in enumerate(Path(path).read_text().splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in KEYS:
            raise ConfigError(f"{path}:{lineno}: unknown key {key!r}")
        out[key] = value
    return out


def resolve_config(file_values: dict[str, str], overrides: dict[str, str]) -> dict[str, object]:
    cfg = {key: default for key, (_, default) in KEYS.items()}
    for source in (file_values, overrides):
        for key, raw in source.items():
            if key not in KEYS:
                raise ConfigError(f"unknown key {key!r}")
            cfg[key] = _convert(key, raw)
    return cfg


def format_config(cfg: dict[str, object]) -> str:
    def text(v):
        return str(v).lower() if isinstance(v, bool) else repr(v) if isinstance(v, float) else str(v)
    return "".join(f"{k}={text(cfg[k])}\n" for k in sorted(cfg))


def model_config(cfg: dict) -> ModelConfig:
    mc = ModelConfig(**{f.name: cfg[f.name] for f in dataclasses.fields(ModelConfig)})
    if mc.head not in ("frn", "bifrn"):
        raise ConfigError(f"head must be frn or bifrn, got {mc.head!r}")
    if mc.channels < 1 or mc.image_size < 16:
        raise ConfigError("channels must be positive and image_size at least 16")
    try:
        mc.attention().validate(mc.channels)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    return mc


def train_config(cfg: dict) -> TrainConfig:
    names = [f.name for f in dataclasses.fields(TrainConfig) if f.name != "seed"]
    try:
        return TrainConfig(**{n: cfg[n] for n in names}, seed=cfg["seed"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def episode_spec(cfg: dict, shot: int | None = None) -> EpisodeSpec:
    try:
        return EpisodeSpec(cfg["way"], cfg["shot"] if shot is None else shot, cfg["query"])
    except ValueError as exc:
        raise ConfigError(str(exc)) from None


def _out_dir(cfg: dict) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    (out / RESOLVED_NAME).write_text(format_config(cfg))
    return out


def _manifest(cfg: dict):
    path = Path(cfg["manifest"]) if cfg["manifest"] else None
    if path is None:
        raise ConfigError("manifest is required")
    if not path.is_file():
        raise FileNotFoundError(f"manifest not found: {path}")
    return load_manifest(path)


def _checkpoint_path(cfg: dict) -> Path:
    if not cfg["checkpoint"]:
        raise ConfigError("checkpoint is required")
    path = Path(cfg["checkpoint"])
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    return path


# commands ---------------------------------------------------------------


def cmd_synth(cfg: dict) -> int:
    if cfg["classes"] < 4:
        raise ConfigError("synth needs at least 4 classes")
    if not 0.0 <= cfg["fg_fraction"] < 1.0 or cfg["clutter_level"] < 0 or cfg["per_class"] < 1:
        raise ConfigError("invalid synthetic data parameters")
    out = _out_dir(cfg)
    sc = SynthConfig(classes=cfg["classes"], images_per_class=cfg["per_class"], size=cfg["size"],
                     fg_fraction=cfg["fg_fraction"], clutter_level=cfg["clutter_level"])
    synth_generate(sc, out, cfg["seed"])
    print(out / "manifest.tsv")
    return EXIT_OK


def cmd_train(cfg: dict) -> int:
    mc, tc = model_config(cfg), train_config(cfg)
    manifest = _manifest(cfg)
    out = _out_dir(cfg)
    try:
        result = train(mc, tc, manifest, out_dir=out)
    except DivergenceError as exc:
        nx.save_checkpoint(out / "checkpoint.lfs", exc.last_good)
        (out / "trace.tsv").write_text(format_trace(exc.trace))
        log.error("%s; last good checkpoint kept at %s", exc, out / "checkpoint.lfs")
        return EXIT_DIVERGED
    print(f"checkpoint={out / 'checkpoint.lfs'}\nbest_epoch={result.best_epoch}")
    return EXIT_OK


def cmd_eval(cfg: dict) -> int:
    mc, spec = model_config(cfg), episode_spec(cfg)
    manifest = _manifest(cfg)
    model = FewShotModel.load(_checkpoint_path(cfg), mc)
    store = ImageStore(manifest, cfg["split"], mc.image_size)
    out = _out_dir(cfg)
    report = evaluate_model(model, store, spec, cfg["n_tasks"], cfg["seed"], cfg["workers"])
    report.write(out / "report.txt", out / "eval_trace.tsv")
    sys.stdout.write(report.to_text())
    return EXIT_OK


def ablation_rows(cfg: dict) -> list[tuple[str, str, dict]]:
    try:
        ratios = [float(r) for r in cfg["ablate_ratios"].split(",") if r.strip()]
    except ValueError:
        raise ConfigError(f"bad ablate_ratios {cfg['ablate_ratios']!r}") from None
    rows = [("mode", mode, {"mode": mode}) for mode in ABLATION_MODES]
    rows += [("fs_ratio", repr(r), {"mode": "lfs", "fs_ratio": r}) for r in ratios]
    return rows


def cmd_ablate(cfg: dict) -> int:
    rows = ablation_rows(cfg)
    manifest = _manifest(cfg)
    for _, _, changes in rows:
        model_config({**cfg, **changes})
    train_config(cfg)
    out = _out_dir(cfg)
    store = None
    lines = ["kind\tsetting\tshot1_mean\tshot1_ci95\tshot5_mean\tshot5_ci95\tstatus\n"]
    codes = []
    for kind, setting, changes in rows:
        row_cfg = {**cfg, **changes, "out": str(out / f"{kind}_{setting}")}
        try:
            mc = model_config(row_cfg)
            row_out = _out_dir(row_cfg)
            result = train(mc, train_config(row_cfg), manifest, out_dir=row_out)
            if store is None:
                store = ImageStore(manifest, cfg["split"], mc.image_size)
            cells = []
            for shot in (1, 5):
                rep = evaluate_model(result.model, store, episode_spec(cfg, shot), cfg["n_tasks"],
                                     cfg["seed"], cfg["workers"])
                cells += [f"{rep.mean:.6f}", f"{rep.ci95:.6f}"]
            lines.append(f"{kind}\t{setting}\t" + "\t".join(cells) + "\tok\n")
            codes.append(EXIT_OK)
        except (LFSError, OSError, ValueError) as exc:
            log.error("ablation row %s=%s failed: %s", kind, setting, exc)
            reason = " ".join(str(exc).split())
            lines.append(f"{kind}\t{setting}\t\t\t\t\tfailed: {reason}\n")
            codes.append(_exit_code(exc))
    (out / "ablation.tsv").write_text("".join(lines))
    sys.stdout.write("".join(lines))
    return EXIT_OK if EXIT_OK in codes else codes[0]


def cmd_heatmap(cfg: dict) -> int:
    mc = model_config(cfg)
    if not cfg["image"]:
        raise ConfigError("image is required")
    model = FewShotModel.load(_checkpoint_path(cfg), mc)
    image = read_pnm(cfg["image"])
    height, width = image.shape[-2:]
    # the whole image is used: no crop, only a resize to the model input
    x = torch.from_numpy(np.ascontiguousarray(resize(image, mc.image_size)))[None]
    with torch.no_grad():
        energy, lfs = model.heatmaps(x)
    out = _out_dir(cfg)
    for name, grid in (("energy", energy[0]), ("lfs", lfs[0])):
        levels = np.round(upscale_nearest(grid.numpy(), height, width) * 255).astype(np.int64)
        write_pgm_ascii(out / f"{name}.pgm", levels)
        print(out / f"{name}.pgm")
    return EXIT_OK


def gradcheck_report(cfg: dict) -> tuple[dict[str, float], dict[str, int]]:
    """Per-parameter worst relative error on a 2-way 1-shot micro-episode."""
    mc = model_config(cfg)
    model = FewShotModel(mc, seed=cfg["seed"])
    model.train()
    rng = nx.make_rng(cfg["seed"], 5)
    size = mc.image_size
    support = torch.from_numpy(rng.uniform(size=(2, 3, size, size)))
    query = torch.from_numpy(rng.uniform(size=(2, 3, size, size)))
    labels = torch.tensor([0, 1])

    def loss():
        return F.cross_entropy(model(support, labels, query, 2), labels)

    refined: dict[str, int] = {}
    report = nx.grad_check_report(loss, dict(model.named_parameters()), h=cfg["gradcheck_h"],
                                  max_entries=cfg["gradcheck_entries"] or None, seed=cfg["seed"],
                                  branch_aware=True, refined=refined)
    return report, refined


def cmd_gradcheck(cfg: dict) -> int:
    out = _out_dir(cfg)
    report, refined = gradcheck_report(cfg)
    lines = ["parameter\tworst_rel_err\trefined_probes\n"]
    lines += [f"{name}\t{err:.3e}\t{refined.get(name, 0)}\n" for name, err in report.items()]
    failing = [name for name, err in report.items() if not err < 1e-4]
    worst = max(report.values(), default=0.0)
    lines.append(f"worst\t{worst:.3e}\t{sum(refined.values())}\n")
    (out / "gradcheck.tsv").write_text("".join(lines))
    sys.stdout.write("".join(lines))
    if failing:
        print("FAIL: " + ", ".join(failing))
        return EXIT_GRADCHECK
    print("PASS")
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "ablate": cmd_ablate,
    "heatmap": cmd_heatmap,
    "gradcheck": cmd_gradcheck,
}


def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, (CheckpointError, ManifestError, SamplingError)):
        return EXIT_MISMATCH
    if isinstance(exc, DivergenceError):
        return EXIT_DIVERGED
    if isinstance(exc, OSError):
        return EXIT_IO
    return 1


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="flat key=value configuration file")
    common.add_argument("-q", "--quiet", action="store_true", help="only log warnings")
    group = common.add_argument_group("configuration keys")
    for key, (_, default) in KEYS.items():
        group.add_argument("--" + key.replace("_", "-"), dest=key, default=None, metavar="V",
                           help=f"(default: {default})")
    parser = argparse.ArgumentParser(prog="lfs-fewshot", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn in COMMANDS.items():
        sub.add_parser(name, parents=[common], help=fn.__name__.removeprefix("cmd_"))
    return parser


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    nx.configure_determinism()
    try:
        file_values = read_config_file(args.config) if args.config else {}
        overrides = {k: getattr(args, k) for k in KEYS if getattr(args, k) is not None}
        cfg = resolve_config(file_values, overrides)
        return COMMANDS[args.command](cfg)
    except (LFSError, OSError) as exc:
        code = _exit_code(exc)
        print(f"error: {exc}", file=sys.stderr)
        return code


if __name__ == "__main__":
    sys.exit(main())
