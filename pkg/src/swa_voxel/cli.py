"""Command-line driver.

Exit codes: 0 success, 1 verification failure, 2 config or usage error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from contextlib import nullcontext
from pathlib import Path

import numpy as np

from .checkpoint import ArchitectureMismatch, CheckpointError, check_architecture, load_checkpoint
from .config import ConfigFileError, RunConfig, parse_dims
from .scene_io import SceneFormatError, load_scene, save_labels, save_scene
from .synth import CLASS_NAMES, SynthConfig, synth_scene
from .train import TrainConfig, TrainConfigError, evaluate, predict_scene, train
from .unet import ConfigError, UNetConfig

log = logging.getLogger("swa_voxel")

EXIT_OK, EXIT_VERIFY, EXIT_CONFIG = 0, 1, 2


class UsageError(Exception):
    pass


def _threads(n):
    if not n:
        return nullcontext()
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:        # BLAS already single-threaded or uncontrollable
        return nullcontext()
    return threadpool_limits(int(n))


def unet_config_from(rc: RunConfig) -> UNetConfig:
    m = rc.section("model")
    return UNetConfig(levels=m["levels"], dim=m["dim"], heads=m["heads"], num_classes=m["num_classes"],
                      variant=m["variant"], expand_radius=m["expand_radius"],
                      scale_energies=m["scale_energies"])


def arch_meta(cfg: UNetConfig) -> dict:
    return {k: (("x".join(map(str, v))) if isinstance(v, (list, tuple)) else v)
            for k, v in cfg.as_dict().items()}


def config_from_meta(meta: dict) -> UNetConfig:
    if not meta:
        raise CheckpointError("checkpoint carries no architecture metadata")
    try:
        return UNetConfig(levels=int(meta["levels"]), dim=int(meta["dim"]), heads=int(meta["heads"]),
                          num_classes=int(meta["num_classes"]), variant=meta["variant"],
                          window=tuple(int(v) for v in meta["window"].split("x")),
                          enc_stride=int(meta["enc_stride"]), enc_padding=int(meta["enc_padding"]),
                          expand_radius=int(meta["expand_radius"]),
                          scale_energies=meta["scale_energies"] == "True")
    except KeyError as exc:
        raise CheckpointError(f"checkpoint metadata lacks key {exc.args[0]!r}") from None


def scene_files(path) -> list[Path]:
    p = Path(path)
    if p.is_file():
        return [p]
    if not p.is_dir():
        raise UsageError(f"no such scene file or directory: {p}")
    files = sorted(p.glob("*.swsc"))
    if not files:
        raise UsageError(f"no .swsc scene files in {p}")
    return files


def _resolved(args) -> RunConfig:
    rc = RunConfig.from_file(args.config) if getattr(args, "config", None) else RunConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise ConfigFileError(f"--set expects key=value, got {item!r}")
        rc.set(key.strip(), value.strip(), origin="--set")
    for flag, key in (("seed", "train.seed"), ("variant", "model.variant"), ("dims", "data.dims"),
                      ("threads", "run.threads")):
        v = getattr(args, flag, None)
        if v is not None:
            rc.set(key, str(v), origin=f"--{flag}")
    return rc


# commands -----------------------------------------------------------------

def cmd_generate(args) -> int:
    dims = parse_dims(args.dims or "32x32x8")
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        for i in range(args.count):
            path = out / f"scene_{i:05}.swsc"
            save_scene(path, synth_scene(args.seed + i, dims, SynthConfig(keep_prob=args.keep_prob)))
    except OSError as exc:
        raise OSError(f"cannot write scenes to {exc.filename or out}: {exc.strerror}") from None
    print(f"wrote {args.count} scene(s) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    rc = _resolved(args)
    if args.data:
        rc.set("data.train", args.data, origin="--data")
    if args.ckpt:
        rc.set("out.checkpoint", args.ckpt, origin="--ckpt")
    if args.log:
        rc.set("out.log", args.log, origin="--log")
    text = rc.dump()
    for line in text.splitlines():
        log.info("config %s", line)
    cfg = unet_config_from(rc)
    t = rc.section("train")
    tcfg = TrainConfig(epochs=t["epochs"], base_lr=t["base_lr"], power=t["power"], optimizer=t["optimizer"],
                       momentum=t["momentum"], weight_decay=t["weight_decay"], batch_size=t["batch_size"],
                       seed=t["seed"], iterations=t["iterations"])
    if rc["data.train"]:
        scenes = [load_scene(p) for p in scene_files(rc["data.train"])]
    else:
        scenes = [synth_scene(tcfg.seed + i, rc["data.dims"], SynthConfig(keep_prob=rc["data.keep_prob"]))
                  for i in range(8)]
    for s in scenes:
        cfg.check_dims(s.dims)
        if s.num_classes != cfg.num_classes:
            raise ConfigError(f"scene num_classes {s.num_classes} != model.num_classes {cfg.num_classes}")
    ckpt = Path(rc["out.checkpoint"])
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    with _threads(rc["run.threads"]):
        res = train(cfg, tcfg, scenes, checkpoint_path=ckpt, log_path=rc["out.log"], meta=arch_meta(cfg))
    Path(str(ckpt) + ".config").write_text(text)
    last = res.history[-1] if res.history else None
    print(f"trained {res.iterations} iterations on {len(scenes)} scene(s); checkpoint {ckpt}"
          + (f"; last epoch loss {last.loss:.5f} iou {last.iou:.4f} miou {last.miou:.4f}" if last else ""))
    return EXIT_OK


def _load_model(args):
    store, meta = load_checkpoint(args.ckpt)
    cfg = config_from_meta(meta)
    if getattr(args, "config", None) or getattr(args, "variant", None):
        check_architecture(meta, arch_meta(unet_config_from(_resolved(args))))
    return store, cfg, meta


def _check_scene(cfg: UNetConfig, scene, path) -> None:
    if scene.num_classes != cfg.num_classes:
        raise ArchitectureMismatch(
            f"architecture mismatch on num_classes: checkpoint={cfg.num_classes} scene {path}={scene.num_classes}")
    cfg.check_dims(scene.dims)


def cmd_eval(args) -> int:
    store, cfg, _ = _load_model(args)
    files = scene_files(args.data)
    scenes = [load_scene(p) for p in files]
    for s, p in zip(scenes, files):
        _check_scene(cfg, s, p)
    with _threads(args.threads):
        rep = evaluate(store, cfg, scenes)
    names = list(CLASS_NAMES[1:cfg.num_classes]) if cfg.num_classes <= len(CLASS_NAMES) else None
    print(rep.table(names))
    print(rep.to_json())
    return EXIT_OK


def cmd_infer(args) -> int:
    store, cfg, _ = _load_model(args)
    scene = load_scene(args.scene)
    _check_scene(cfg, scene, args.scene)
    with _threads(args.threads):
        pred = predict_scene(store, cfg, scene)
    save_labels(args.out, pred)
    print(f"wrote {args.out} ({int((pred.labels != 0).sum())} occupied voxels)")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import verify as V
    seeds = range(args.seeds) if args.seeds else None
    results = {}
    with _threads(args.threads):
        if args.preset in ("engine", "all"):
            for op, err in V.gradcheck_engine(seeds or range(20)).items():
                results[f"engine.{op}"] = err
        if args.preset in ("block", "all"):
            results["swa_block"] = V.gradcheck_block(seeds or range(20), variant=args.variant or "A")
        if args.preset in ("unet", "all"):
            results["unet_2level"] = V.gradcheck_unet(seeds or range(3), variant=args.variant or "A")
    ok = True
    for name, err in results.items():
        passed = err <= V.GRAD_TOL
        ok &= passed
        print(f"{name:<32} max_rel_err {err:.3e} {'pass' if passed else 'FAIL'}")
    return EXIT_OK if ok else EXIT_VERIFY


def cmd_oracle_compare(args) -> int:
    from . import verify as V
    with _threads(args.threads):
        err = V.oracle_compare(args.cases, args.seed or 0)
    passed = err <= V.ORACLE_TOL
    print(f"oracle-compare cases {args.cases} max_rel_err {err:.3e} {'pass' if passed else 'FAIL'}")
    return EXIT_OK if passed else EXIT_VERIFY


def cmd_bench(args) -> int:
    from .bench import bench_skipping, format_rows
    densities = [float(v) for v in args.density.split(",")]
    if any(not 0 <= v <= 1 for v in densities):
        raise UsageError("densities must lie in [0, 1]")
    with _threads(args.threads):
        rows = bench_skipping(parse_dims(args.dims or "64x64x16"), densities, args.dim, args.heads,
                              args.seed or 0, args.repeats, args.layout)
    print(format_rows(rows))
    return EXIT_OK


# parser -------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="swa-voxel", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = ap.add_subparsers(dest="command", required=True)

    def common(p, config=True):
        if config:
            p.add_argument("--config", help="plain-text key = value config file")
            p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
            p.add_argument("--variant", choices=["A", "B", "C"])
        p.add_argument("--seed", type=int)
        p.add_argument("--threads", type=int, help="BLAS threads; 1 is the determinism mode")
        p.add_argument("--dims", help="grid dims HxWxD")
        return p

    p = common(sub.add_parser("generate", help="write synthetic scene files"), config=False)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--keep-prob", type=float, default=0.7)
    p.set_defaults(func=cmd_generate, seed=0)

    p = common(sub.add_parser("train", help="train a model"))
    p.add_argument("--data", help="directory of .swsc scenes (default: 8 synthetic scenes)")
    p.add_argument("--ckpt", help="checkpoint output path")
    p.add_argument("--log", help="per-epoch metrics CSV path")
    p.set_defaults(func=cmd_train)

    p = common(sub.add_parser("eval", help="evaluate a checkpoint"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True, help="scene file or directory")
    p.set_defaults(func=cmd_eval)

    p = common(sub.add_parser("infer", help="predict one scene"))
    p.add_argument("--ckpt", required=True)
    p.add_argument("--scene", required=True)
    p.add_argument("--out", required=True, help="output u16 dense label volume")
    p.set_defaults(func=cmd_infer)

    p = common(sub.add_parser("gradcheck", help="finite-difference gradient certification"), config=False)
    p.add_argument("--preset", choices=["engine", "block", "unet", "all"], default="engine")
    p.add_argument("--seeds", type=int, help="number of seeds (default 20, or 3 for unet)")
    p.add_argument("--variant", choices=["A", "B"])
    p.set_defaults(func=cmd_gradcheck)

    p = common(sub.add_parser("oracle-compare", help="windowed SWA vs. loop reference"), config=False)
    p.add_argument("--cases", type=int, default=100)
    p.set_defaults(func=cmd_oracle_compare)

    p = common(sub.add_parser("bench", help="skip vs. no-skip throughput sweep"), config=False)
    p.add_argument("--density", default="0,0.01,0.05,0.2", help="comma-separated active densities")
    p.add_argument("--dim", type=int, default=32)
    p.add_argument("--heads", type=int, default=2)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--layout", choices=["surface", "uniform"], default="surface")
    p.set_defaults(func=cmd_bench)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    args = ap.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose or args.command == "train" else logging.WARNING,
                        format="%(levelname)s %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (ConfigFileError, ConfigError, TrainConfigError, CheckpointError, SceneFormatError,
            UsageError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
