"""Command-line driver: synth | train | render | eval | viz-depth.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .errors import DataError, NumericalError
from .imageio import write_image
from .metrics import avg_metric, psnr, ssim
from .model import HybridModel
from .rasterizer import RenderOptions, render, render_primitive_distance
from .scene import SceneParams, box_planes, make_plane_scene, read_scene_dir, scene_matches, tilted_plane, write_scene_dir
from .trainer import TrainConfig, train

log = logging.getLogger("raysplat")

# viz-depth ramp, near to far: (position, rgb)
DEPTH_RAMP = (
    (0.0, (1.0, 1.0, 0.6)),
    (0.25, (0.99, 0.65, 0.2)),
    (0.5, (0.85, 0.25, 0.35)),
    (0.75, (0.4, 0.1, 0.5)),
    (1.0, (0.05, 0.03, 0.2)),
)


def colorize_depth(depth: np.ndarray) -> np.ndarray:
    """Map depth to the fixed ramp (near bright, far dark); pixels without surface are black."""
    valid = depth > 0
    out = np.zeros((*depth.shape, 3))
    if not valid.any():
        return out
    lo, hi = depth[valid].min(), depth[valid].max()
    t = np.zeros_like(depth) if hi <= lo else (depth - lo) / (hi - lo)
    xs = np.array([p for p, _ in DEPTH_RAMP])
    cs = np.array([c for _, c in DEPTH_RAMP])
    for ch in range(3):
        out[..., ch] = np.interp(t, xs, cs[:, ch])
    out[~valid] = 0.0
    return out


def _write_snapshot(out: Path, name: str, payload: dict) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / name).write_text(json.dumps({"version": __version__, **payload}, indent=1, sort_keys=True, default=str))


# --- synth ------------------------------------------------------------------------


def cmd_synth(a) -> int:
    if a.kind == "plane":
        planes = [tilted_plane(a.tilt, depth=a.radius, checker=a.checker)]
    else:
        planes = [tilted_plane(a.tilt, depth=a.radius + 1.5, checker=a.checker)]
        planes += box_planes((0.0, 0.0, a.radius - 0.3), (1.0, 1.0, 1.0), checker=a.checker)
    params = SceneParams(planes=planes, num_views=a.views, width=a.size, height=a.size, focal=a.focal or 0.95 * a.size,
                         radius=a.radius, spread_deg=a.spread, target=(0.0, 0.0, a.radius), held_out=a.held_out,
                         supersample=a.supersample, seed=a.seed)
    scene = make_plane_scene(params)
    matches = scene_matches(scene, a.matches, a.noise_px, a.outliers, seed=a.seed)
    extra = {"version": __version__, "matches": {"count_per_pair": a.matches, "noise_px": a.noise_px,
                                                 "outlier_rate": a.outliers, "seed": a.seed}}
    write_scene_dir(a.out, scene, matches, extra)
    print(f"wrote {len(scene.cameras)} views and {len(matches)} matches to {a.out}")
    return 0


# --- train ------------------------------------------------------------------------


def _parse_z_lr(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError as exc:
        raise argparse.ArgumentTypeError("--z-lr expects START:END, e.g. 0.1:1.6e-6") from exc


def resolve_train_config(a) -> TrainConfig:
    """Defaults, then the config file, then explicit flags."""
    base = TrainConfig().to_dict()
    if a.config:
        data = json.loads(Path(a.config).read_text())
        data = data.get("config", data)
        for k, v in data.items():
            if k in ("weights", "lr") and isinstance(v, dict):
                base[k].update(v)
            elif k in base:
                base[k] = v
            else:
                raise DataError(f"{a.config}: unknown config key {k!r}")
    flags = {"iterations": a.iters, "cache_window": a.cache_window, "seed": a.seed, "init": a.init,
             "cache_mode": a.cache_mode}
    for k, v in flags.items():
        if v is not None:
            base[k] = v
    for k, v in {"beta": a.beta, "delta": a.delta, "eta": a.eta, "lam": a.lam}.items():
        if v is not None:
            base["weights"][k] = v
    if a.z_lr is not None:
        base["z_lr_start"], base["z_lr_end"] = a.z_lr
    if a.structure_only:
        base["photometric"] = False
    if base["cache_window"] > base["iterations"]:
        base["cache_window"] = base["iterations"]
    return TrainConfig.from_dict(base)


def cmd_train(a) -> int:
    scene = read_scene_dir(a.scene)
    cfg = resolve_train_config(a)
    out = Path(a.out)
    model, rows = train(scene.cameras, scene.images, scene.matches, cfg, out, train_ids=scene.train_ids)
    last = rows[-1] if rows else {}
    print(f"trained {cfg.iterations} iterations: {model.num_ray_bound} ray-bound, {model.num_free} free; "
          f"final loss {last.get('total', float('nan')):.6g}; checkpoint {out / 'model.scgs'}")
    return 0


# --- render / eval / viz-depth ----------------------------------------------------------


def _load_for_views(a):
    scene = read_scene_dir(a.scene, require_matches=False)
    model = HybridModel.load(a.checkpoint)
    if a.views:
        ids = [v.strip() for v in a.views.split(",") if v.strip()]
    else:
        ids = scene.test_ids or scene.train_ids
    known = {c.id for c in scene.cameras}
    for v in ids:
        if v not in known:
            raise DataError(f"view {v!r} not in {Path(a.scene) / 'cameras.json'}")
    return scene, model, ids


def cmd_render(a) -> int:
    scene, model, ids = _load_for_views(a)
    out = Path(a.out)
    (out / "color").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(parents=True, exist_ok=True)
    opts = RenderOptions(background=tuple(a.background))
    for v in ids:
        r = render(model, scene.camera(v), opts)
        write_image(out / "color" / f"{v}.png", r.color)
        np.save(out / "depth" / f"{v}.npy", r.depth)
        d = r.depth
        write_image(out / "depth" / f"{v}.png", d / d.max() if d.max() > 0 else d)
    _write_snapshot(out, "run.json", {"command": "render", "args": vars(a)})
    print(f"rendered {len(ids)} views to {out}")
    return 0


def eval_views(model: HybridModel, scene, ids, background=(0.0, 0.0, 0.0)) -> list[dict]:
    rows = []
    for v in ids:
        if v not in scene.images:
            raise DataError(f"no ground-truth image for view {v!r}")
        r = render(model, scene.camera(v), RenderOptions(background=tuple(background)))
        gt = scene.images[v]
        p = psnr(r.color, gt)
        s = ssim(r.color, gt)
        avg = avg_metric(p, s, scene.lpips.get(v))
        rows.append({"view": v, "psnr": p, "ssim": s, "avg": avg.value, "avg_partial": avg.partial})
    return rows


def cmd_eval(a) -> int:
    scene, model, ids = _load_for_views(a)
    rows = eval_views(model, scene, ids, a.background)
    mean = {"view": "mean", "psnr": float(np.mean([r["psnr"] for r in rows])),
            "ssim": float(np.mean([r["ssim"] for r in rows])), "avg": float(np.mean([r["avg"] for r in rows])),
            "avg_partial": any(r["avg_partial"] for r in rows)}
    table = rows + [mean]
    print(f"{'view':>8} {'PSNR':>8} {'SSIM':>7} {'AVG':>7}")
    for r in table:
        tag = " (partial)" if r["avg_partial"] else ""
        print(f"{r['view']:>8} {r['psnr']:8.3f} {r['ssim']:7.4f} {r['avg']:7.4f}{tag}")
    if a.out:
        out = Path(a.out)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "metrics.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=["view", "psnr", "ssim", "avg", "avg_partial"])
            w.writeheader()
            w.writerows(table)
        _write_snapshot(out, "run.json", {"command": "eval", "args": vars(a)})
    return 0


def cmd_viz_depth(a) -> int:
    scene, model, ids = _load_for_views(a)
    out = Path(a.out)
    out.mkdir(parents=True, exist_ok=True)
    for v in ids:
        d = render_primitive_distance(model, scene.camera(v), clamp=not a.no_clamp)
        np.save(out / f"{v}_distance.npy", d)
        write_image(out / f"{v}_distance.png", colorize_depth(d))
    _write_snapshot(out, "run.json", {"command": "viz-depth", "args": vars(a)})
    print(f"wrote {len(ids)} distance maps to {out}")
    return 0


# --- parser -----------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="raysplat", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic plane scene directory")
    s.add_argument("--out", required=True)
    s.add_argument("--views", type=int, default=3)
    s.add_argument("--size", type=int, default=64)
    s.add_argument("--focal", type=float, default=None)
    s.add_argument("--matches", type=int, default=500, help="matches per view pair")
    s.add_argument("--noise-px", type=float, default=0.0)
    s.add_argument("--outliers", type=float, default=0.0)
    s.add_argument("--kind", choices=("plane", "box"), default="plane")
    s.add_argument("--tilt", type=float, default=30.0)
    s.add_argument("--spread", type=float, default=30.0, help="camera arc in degrees")
    s.add_argument("--radius", type=float, default=4.0)
    s.add_argument("--checker", type=float, default=4.0)
    s.add_argument("--supersample", type=int, default=2)
    s.add_argument("--held-out", action=argparse.BooleanOptionalAction, default=True)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="optimize a hybrid model on a scene directory")
    t.add_argument("scene")
    t.add_argument("--out", required=True)
    t.add_argument("--config", default=None, help="JSON config (or a previous run's config.json)")
    t.add_argument("--iters", type=int, default=None)
    t.add_argument("--beta", type=float, default=None)
    t.add_argument("--delta", type=float, default=None)
    t.add_argument("--lam", type=float, default=None)
    t.add_argument("--cache-window", type=int, default=None)
    t.add_argument("--eta", type=float, default=None)
    t.add_argument("--z-lr", type=_parse_z_lr, default=None, metavar="START:END")
    t.add_argument("--init", choices=("random", "triangulate"), default=None)
    t.add_argument("--cache-mode", choices=("per_primitive", "snapshot"), default=None)
    t.add_argument("--structure-only", action="store_true", help="optimize the structure losses without rendering")
    t.add_argument("--seed", type=int, default=None)
    t.set_defaults(func=cmd_train)

    for name, func, helptext in (("render", cmd_render, "render color and depth"),
                                 ("eval", cmd_eval, "PSNR / SSIM / AVG against ground truth"),
                                 ("viz-depth", cmd_viz_depth, "nearest-primitive distance maps")):
        r = sub.add_parser(name, help=helptext)
        r.add_argument("checkpoint")
        r.add_argument("--scene", required=True)
        r.add_argument("--views", default=None, help="comma-separated view ids (default: held-out views)")
        r.add_argument("--out", required=name != "eval", default=None)
        r.add_argument("--background", type=float, nargs=3, default=(0.0, 0.0, 0.0))
        if name == "viz-depth":
            r.add_argument("--no-clamp", action="store_true", help="disable the 0.99 alpha clamp")
        r.set_defaults(func=func)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    a = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if a.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return a.func(a)
    except DataError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except (FileNotFoundError, IsADirectoryError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
