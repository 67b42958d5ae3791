"""Command-line entry point: ``nexus <command> [options]``.

Every command writes ``run.json`` with its fully resolved configuration into
``--out``. Exit codes: 0 success, 2 configuration error, 3 numeric abort.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3


class ConfigError(Exception):
    pass


def _load_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON in {path}: {exc}") from exc


def _seed(default: int) -> int:
    env = os.environ.get("NEXUS_SEED")
    return int(env) if env not in (None, "") else default


def _write_run(out: Path, command: str, config: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "run.json").write_text(json.dumps({"command": command, "config": config},
                                             indent=1, sort_keys=True, default=str))


def _onoff(v: str) -> bool:
    if v not in ("on", "off"):
        raise argparse.ArgumentTypeError("expected 'on' or 'off'")
    return v == "on"


def write_ppm(path, image: np.ndarray) -> None:
    """``3 x H x W`` array in [-1, 1] -> binary PPM (P6, 8-bit)."""
    img = np.clip(np.round((np.asarray(image) + 1.0) * 127.5), 0, 255).astype(np.uint8)
    _, h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.transpose(1, 2, 0).tobytes())


def read_ppm(path) -> np.ndarray:
    with open(path, "rb") as fh:
        data = fh.read()
    parts = data.split(maxsplit=4)
    if parts[0] != b"P6":
        raise ValueError(f"{path}: not a P6 file")
    w, h = int(parts[1]), int(parts[2])
    pix = np.frombuffer(parts[4][: w * h * 3], dtype=np.uint8).reshape(h, w, 3)
    return pix.transpose(2, 0, 1)


# ---------------------------------------------------------------- setup helpers

def _setup_from(cfg: dict):
    from .diffusion import TrainConfig
    from .experiments import ToySetup
    from .unet import UNetConfig

    cfg = dict(cfg)
    unet = UNetConfig.from_dict(cfg.pop("unet")) if "unet" in cfg else None
    pre = TrainConfig.from_dict(cfg.pop("pretrain")) if "pretrain" in cfg else None
    unknown = sorted(set(cfg) - set(ToySetup.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown setup keys: {unknown}")
    s = ToySetup(**cfg)
    if unet is not None:
        s.unet = unet
    if pre is not None:
        s.pretrain = pre
    return s


def _run_from(cfg: dict, args):
    from .diffusion import TrainConfig
    from .experiments import AdapterRun

    cfg = dict(cfg)
    train = TrainConfig.from_dict(cfg.pop("train")) if "train" in cfg else None
    unknown = sorted(set(cfg) - set(AdapterRun.__dataclass_fields__))
    if unknown:
        raise ConfigError(f"unknown adapter-run keys: {unknown}")
    run = AdapterRun(**cfg)
    if train is not None:
        run.train = train
    for flag, attr in (("variant", "variant"), ("groups", "groups"), ("blocks", "stages"),
                       ("prompt_to_adapter", "prompt_to_adapter"),
                       ("prompt_to_backbone", "prompt_to_backbone")):
        v = getattr(args, flag, None)
        if v is not None:
            setattr(run, attr, v)
    if getattr(args, "steps", None) is not None:
        run.train.steps = args.steps
    run.train.seed = _seed(run.train.seed if args.seed is None else args.seed)
    return run


def _split_config(path) -> tuple[dict, dict]:
    cfg = _load_json(path)
    unknown = sorted(set(cfg) - {"setup", "run"})
    if unknown:
        raise ConfigError(f"unknown top-level config keys: {unknown} (expected 'setup', 'run')")
    return cfg.get("setup", {}), cfg.get("run", {})


# ---------------------------------------------------------------- commands

def cmd_gen(args) -> int:
    from .data import generate, write_dataset

    seed = _seed(args.seed)
    out = Path(args.out)
    ds = generate(args.n, args.kind, seed, args.size)
    out.mkdir(parents=True, exist_ok=True)
    path = out / "dataset.nxd"
    write_dataset(ds, path)
    _write_run(out, "gen", {"n": args.n, "kind": args.kind, "seed": seed, "size": args.size,
                            "dataset": str(path)})
    print(f"wrote {len(ds)} samples to {path}")
    return EXIT_OK


def cmd_pretrain(args) -> int:
    from .experiments import Pipeline

    setup_cfg, _ = _split_config(args.config)
    setup = _setup_from(setup_cfg)
    setup.pretrain.seed = _seed(setup.pretrain.seed if args.seed is None else args.seed)
    if args.steps is not None:
        setup.pretrain.steps = args.steps
    out = Path(args.out)
    pipe = Pipeline(setup, root=out)
    pipe.backbone()
    _write_run(out, "pretrain", {"setup": setup.to_dict(), "checkpoint": str(pipe.backbone_path())})
    print(f"backbone checkpoint: {pipe.backbone_path()}")
    return EXIT_OK


def cmd_train_adapter(args) -> int:
    from .experiments import Pipeline

    setup_cfg, run_cfg = _split_config(args.config)
    setup = _setup_from(setup_cfg)
    run = _run_from(run_cfg, args)
    out = Path(args.out)
    pipe = Pipeline(setup, root=out)
    pipe.denoiser(run)
    ckpt = pipe.adapter_path(run)
    _write_run(out, "train-adapter", {"setup": setup.to_dict(), "run": asdict(run),
                                      "checkpoint": str(ckpt), "backbone": str(pipe.backbone_path())})
    print(f"adapter checkpoint: {ckpt}")
    return EXIT_OK


def _pipeline_for_run_dir(run_dir: Path):
    from .experiments import Pipeline

    info = json.loads((run_dir / "run.json").read_text())["config"]
    setup = _setup_from(info["setup"])
    run = None
    if "run" in info:
        run = _run_from(info["run"], argparse.Namespace(seed=None))
        run.train.seed = info["run"]["train"]["seed"]
    return Pipeline(setup, root=run_dir), run


def cmd_sample(args) -> int:
    from .data import read_dataset
    from .diffusion import DiffusionSchedule, p_sample_loop

    run_dir = Path(args.run)
    if not (run_dir / "run.json").exists():
        raise ConfigError(f"{run_dir} has no run.json from train-adapter")
    pipe, run = _pipeline_for_run_dir(run_dir)
    if run is None or not pipe.adapter_path(run).exists():
        raise ConfigError(f"no trained adapter found in {run_dir}")
    model = pipe.denoiser(run)
    ds = read_dataset(args.condition)
    if not 0 <= args.index < len(ds):
        raise ConfigError(f"index {args.index} outside dataset of {len(ds)}")
    prompt = args.prompt if args.prompt is not None else ds.captions[args.index]
    dtype = run.train.dtype
    cond = ds.conditions[args.index:args.index + 1].astype(dtype)
    text = pipe.encoder.encode(prompt).tokens.data[None].astype(dtype)
    seed = _seed(args.seed)
    trace = [] if args.log_branches else None
    img = p_sample_loop(model, cond, text, args.steps, args.guidance, seed,
                        DiffusionSchedule(run.train.T), trace=trace)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_ppm(out / "sample.ppm", img[0])
    write_ppm(out / "condition.ppm", cond[0])
    cfg = {"run_dir": str(run_dir), "condition": str(args.condition), "index": args.index,
           "prompt": prompt, "steps": args.steps, "guidance": args.guidance, "seed": seed}
    if trace is not None:
        cfg["branch_log"] = [{"t": e["t"],
                              "eps_equals_cond": bool(np.array_equal(e["eps"], e["eps_cond"])),
                              "eps_equals_uncond": bool(np.array_equal(e["eps"], e["eps_uncond"]))}
                             for e in trace]
        for e in cfg["branch_log"]:
            print(f"t={e['t']:4d} eps==cond {e['eps_equals_cond']} eps==uncond {e['eps_equals_uncond']}")
    _write_run(out, "sample", cfg)
    print(f"wrote {out / 'sample.ppm'}")
    return EXIT_OK


def cmd_count(args) -> int:
    from .adapter import AdapterConfig
    from .complexity import analyze, report_for

    if (args.preset is None) == (args.config is None):
        raise ConfigError("give exactly one of --preset or --config")
    if args.preset is not None:
        try:
            rep = report_for(args.preset, args.resolution, args.flop_factor)
        except KeyError as exc:
            raise ConfigError(str(exc)) from exc
    else:
        try:
            cfg = AdapterConfig.from_dict(_load_json(args.config))
        except (KeyError, TypeError, ValueError) as exc:
            raise ConfigError(str(exc)) from exc
        rep = analyze(cfg, args.resolution, args.n_text, args.flop_factor)
    print(rep.to_text())
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.csv").write_text(rep.to_csv())
        (out / "report.txt").write_text(rep.to_text() + "\n")
        _write_run(out, "count", {"preset": args.preset, "config": rep.config,
                                  "resolution": args.resolution, "n_text": rep.n_text,
                                  "flop_factor": args.flop_factor})
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from . import gradcheck

    results = gradcheck.run(args.scope, seed=_seed(args.seed))
    print(gradcheck.format_table(results))
    if args.out:
        _write_run(Path(args.out), "gradcheck", {"scopes": args.scope, "seed": _seed(args.seed),
                                                 "results": [{**asdict(r), "ok": r.ok} for r in results]})
    return EXIT_OK if all(r.ok for r in results) else 1


def cmd_eval(args) -> int:
    from .data import read_dataset

    run_dir = Path(args.run)
    if not (run_dir / "run.json").exists():
        raise ConfigError(f"{run_dir} has no run.json")
    pipe, run = _pipeline_for_run_dir(run_dir)
    if args.dataset:
        pipe._eval = read_dataset(args.dataset)
    rep = pipe.evaluate(None if args.no_adapter else run, n=args.n, guidance=args.guidance,
                        steps=args.steps, seed=_seed(args.seed))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "eval.json").write_text(json.dumps(rep.to_dict(), indent=1))
    _write_run(out, "eval", {"run_dir": str(run_dir), "dataset": args.dataset, "n": rep.n,
                             "guidance": args.guidance, "steps": args.steps, "seed": _seed(args.seed),
                             "no_adapter": args.no_adapter})
    print(json.dumps(rep.to_dict(), indent=1))
    return EXIT_OK


def cmd_preset(args) -> int:
    from .diffusion import PRESETS

    if args.name not in PRESETS:
        raise ConfigError(f"unknown training preset {args.name!r}; choose from {sorted(PRESETS)}")
    print(json.dumps(PRESETS[args.name].to_dict(), indent=1))
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="nexus", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--n", type=int, default=1000)
    g.add_argument("--kind", choices=("edge", "depth"), default="edge")
    g.add_argument("--size", type=int, choices=(32, 64, 128), default=32)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_gen)

    g = sub.add_parser("pretrain", help="pretrain and freeze the toy backbone")
    g.add_argument("--config", help="JSON with a 'setup' section")
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_pretrain)

    g = sub.add_parser("train-adapter", help="train an adapter against the frozen backbone")
    g.add_argument("--config", help="JSON with 'setup' and 'run' sections")
    g.add_argument("--variant", choices=("prime", "slim"))
    g.add_argument("--groups", type=int)
    g.add_argument("--blocks", type=int, choices=(2, 3, 4))
    g.add_argument("--prompt-to-adapter", type=_onoff, dest="prompt_to_adapter")
    g.add_argument("--prompt-to-backbone", type=_onoff, dest="prompt_to_backbone")
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_train_adapter)

    g = sub.add_parser("sample", help="sample one image for a dataset condition")
    g.add_argument("--run", required=True, help="directory written by train-adapter")
    g.add_argument("--condition", required=True, help="dataset file holding the condition")
    g.add_argument("--index", type=int, default=0)
    g.add_argument("--prompt")
    g.add_argument("--steps", type=int, default=35)
    g.add_argument("--guidance", type=float, default=7.5)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--log-branches", action="store_true",
                   help="print per-step equality of the guided noise with each branch")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_sample)

    g = sub.add_parser("count", help="parameter / FLOP report")
    g.add_argument("--preset", help="prime-full, slim-full or t2i-full")
    g.add_argument("--config", help="AdapterConfig JSON")
    g.add_argument("--resolution", type=int, default=512)
    g.add_argument("--n-text", type=int, default=77)
    g.add_argument("--flop-factor", type=int, choices=(1, 2), default=1)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_count)

    g = sub.add_parser("gradcheck", help="finite-difference gradient checks")
    g.add_argument("--scope", nargs="+", choices=("primitives", "blocks", "end2end"),
                   default=["primitives", "blocks", "end2end"])
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out")
    g.set_defaults(fn=cmd_gradcheck)

    g = sub.add_parser("eval", help="sample held-out conditions and score them")
    g.add_argument("--run", required=True, help="directory written by train-adapter")
    g.add_argument("--dataset", help="dataset file (default: the setup's held-out split)")
    g.add_argument("--n", type=int)
    g.add_argument("--guidance", type=float)
    g.add_argument("--steps", type=int)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--no-adapter", action="store_true", help="score unconditional backbone samples")
    g.add_argument("--out", required=True)
    g.set_defaults(fn=cmd_eval)

    g = sub.add_parser("preset", help="print a named training preset")
    g.add_argument("name")
    g.set_defaults(fn=cmd_preset)
    return p


def main(argv=None) -> int:
    from .tensor import NumericError

    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except NumericError as exc:
        print(f"numeric abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (ConfigError, KeyError, TypeError, ValueError, FileNotFoundError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
