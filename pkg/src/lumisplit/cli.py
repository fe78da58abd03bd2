"""Command line: lumisplit {gen, fit, relight, swap-eval, eval, gradcheck}.

Exit codes: 0 ok, 1 usage or config error, 2 I/O error, 3 numerical failure.
LUMISPLIT_THREADS caps the BLAS thread pool (0 or unset = library default).
"""
from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import gradcheck, io, synth
from .pipeline import ConfigError, FitConfig, NumericalError, acceptance_config, fit, relight, swap_synthesize

EXIT_USAGE, EXIT_IO, EXIT_NUMERICAL = 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _thread_limit():
    raw = os.environ.get("LUMISPLIT_THREADS", "0").strip() or "0"
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"LUMISPLIT_THREADS must be an integer, got {raw!r}") from None
    if n < 0:
        raise UsageError("LUMISPLIT_THREADS must be >= 0")
    if n == 0:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits
    return threadpool_limits(limits=n)


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen(a) -> int:
    spec = synth.SceneSpec(k=a.k, n_regions=a.regions, occluder=a.occluder, image_size=a.image_size,
                           texture_size=a.texture_size, landmark_noise=a.landmark_noise, seg_noise=a.seg_noise)
    try:
        spec.validate()
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if a.pair:
        src, tgt = synth.make_pair(a.seed, a.image_size, a.texture_size, a.k)
        synth.save_scene(src, Path(a.out) / "source")
        synth.save_scene(tgt, Path(a.out) / "target")
        print(f"wrote source/target pair to {a.out}")
    else:
        synth.save_scene(synth.gen_scene(a.seed, spec), a.out)
        print(f"wrote scene to {a.out}")
    return 0


def _config(a) -> FitConfig:
    if a.config:
        cfg = FitConfig.from_file(a.config)
    elif a.preset == "acceptance":
        cfg = acceptance_config()
    else:
        cfg = FitConfig()
    if a.seed is not None:
        cfg = cfg.replace(seed=a.seed)
    return cfg


def cmd_fit(a) -> int:
    from .report import save_fit
    cfg = _config(a)
    scene = synth.load_scene(a.scene)
    res = fit(scene, cfg)
    save_fit(res, a.out, scene if scene.gt else None, figures=not a.no_figures)
    print(f"fit done in {res.runtime_seconds:.1f}s: n_L = {res.n_l}, wrote {a.out}")
    return 0


def _read_lights(path) -> np.ndarray:
    d = io.read_json(path)
    coeffs = d["coeffs"] if isinstance(d, dict) else d
    arr = np.asarray(coeffs, dtype=np.float64)
    if isinstance(d, dict) and "alive" in d and arr.ndim == 3:
        arr = arr[np.asarray(d["alive"], dtype=bool)]
    if arr.ndim not in (2, 3) or arr.shape[-2] != 3:
        raise UsageError(f"{path}: lights must be a (3, C) or (n, 3, C) coefficient array")
    return arr


def cmd_relight(a) -> int:
    from .report import load_fit
    res = load_fit(a.fit)
    lights = _read_lights(a.lights)
    try:
        img = relight(res, lights, frame=a.frame)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    io.write_png(a.out, img)
    print(f"wrote {a.out}")
    return 0


def cmd_swap_eval(a) -> int:
    from .report import load_fit, swap_report
    src = load_fit(a.fit_src)
    tgt = load_fit(a.fit_tgt)
    try:
        synthesized = swap_synthesize(src, tgt)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for i, img in enumerate(synthesized):
        io.write_png(out / f"swap_{i:03d}.png", img)
    report = swap_report(src, tgt, synthesized)
    io.write_json(out / "metrics.json", report.to_dict())
    print(json.dumps(report.to_dict(), sort_keys=True))
    return 0


def cmd_eval(a) -> int:
    from .report import fit_metrics, load_fit
    res = load_fit(a.pred)
    scene = synth.load_scene(a.gt)
    if not scene.gt:
        raise FileNotFoundError(f"{a.gt}: scene has no ground truth (gt/coeffs.json)")
    if scene.frames.shape != res.inputs.frames.shape:
        raise UsageError("prediction and ground-truth scene differ in frame count or resolution")
    report, extra = fit_metrics(res, scene)
    payload = {**report.to_dict(), **extra}
    text = json.dumps(payload, indent=2, sort_keys=True)
    if a.out:
        Path(a.out).write_text(text + "\n")
    print(text)
    return 0


def cmd_gradcheck(a) -> int:
    ok = gradcheck.main_report(a.seed)
    if not ok:
        print("error: finite-difference check failed", file=sys.stderr)
        return EXIT_NUMERICAL
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="lumisplit", description="Light-decoupled texture and illumination recovery.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic scene directory")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--regions", type=int, default=1, help="light regions (1-3)")
    g.add_argument("--occluder", choices=synth.OCCLUDERS, default="none")
    g.add_argument("--k", type=int, default=1, help="frames")
    g.add_argument("--image-size", type=int, default=128)
    g.add_argument("--texture-size", type=int, default=128)
    g.add_argument("--landmark-noise", type=float, default=0.0)
    g.add_argument("--seg-noise", type=float, default=0.0)
    g.add_argument("--pair", action="store_true", help="write a source/target pair for swap-eval")
    g.add_argument("--out", required=True)
    g.set_defaults(func=cmd_gen)

    f = sub.add_parser("fit", help="fit a scene directory")
    f.add_argument("--scene", required=True)
    f.add_argument("--config", help="key = value config file (every key required)")
    f.add_argument("--preset", choices=("default", "acceptance"), default="default",
                   help="built-in config when --config is not given")
    f.add_argument("--seed", type=int, help="override the config seed")
    f.add_argument("--no-figures", action="store_true")
    f.add_argument("--out", required=True)
    f.set_defaults(func=cmd_fit)

    r = sub.add_parser("relight", help="re-render a fitted frame under user lights")
    r.add_argument("--fit", required=True)
    r.add_argument("--lights", required=True, help="JSON with 'coeffs' of shape (3, C) or (n_L, 3, C)")
    r.add_argument("--frame", type=int, default=0)
    r.add_argument("--out", required=True, help="output PNG")
    r.set_defaults(func=cmd_relight)

    s = sub.add_parser("swap-eval", help="render the target fit with the source fit's texture")
    s.add_argument("--fit-src", required=True)
    s.add_argument("--fit-tgt", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_swap_eval)

    e = sub.add_parser("eval", help="metrics of a fit against a ground-truth scene")
    e.add_argument("--pred", required=True, help="fit directory")
    e.add_argument("--gt", required=True, help="scene directory")
    e.add_argument("--out", help="write the JSON report here as well")
    e.set_defaults(func=cmd_eval)

    c = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    c.add_argument("--seed", type=int, default=0)
    c.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    try:
        a = build_parser().parse_args(argv)
        if a.command is None:
            raise UsageError("missing subcommand (gen, fit, relight, swap-eval, eval, gradcheck)")
        logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(message)s")
        with _thread_limit():
            return a.func(a)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, FloatingPointError) as exc:
        print(f"error: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: I/O: {exc}", file=sys.stderr)
        return EXIT_IO
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
