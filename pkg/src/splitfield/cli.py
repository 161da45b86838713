"""Command-line driver: dataset generation, split training, attacks and reports."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import math
import sys
from pathlib import Path

import numpy as np

from . import plotting
from .attack import (
    PoseSearchSpec,
    SurrogateAttack,
    model_renderer,
    pose_grid_search,
    render_views,
    replay_trace,
    scene_aided_finetune,
    search_space_size,
)
from .config import ConfigError, ExperimentConfig, defense_preset, load_config, preset_names
from .defense import MODES
from .metrics import MetricError, metric_report, psnr
from .nerf import ClientModel, NerfModel, ServerModel, load_state, save_model
from .scene import (
    DatasetError,
    default_scene,
    ensure_dir,
    oracle_render,
    read_ppm,
    save_dataset,
    write_ppm,
)
from .training import NumericError, serve, server_session, train_monolithic, train_split
from .transport import TraceWriter, tcp_accept, tcp_listen

log = logging.getLogger("splitfield")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(EXIT_USAGE)


def _float_or_inf(text: str) -> float:
    if text.lower() in ("inf", "infinity", "∞"):
        return math.inf
    value = float(text)
    if value < 0:
        raise argparse.ArgumentTypeError("ratio must be non-negative")
    return value


# ---------------------------------------------------------------- helpers


def _config_from_args(args) -> ExperimentConfig:
    over: dict = {"train": {}, "dataset": {}, "attack": {}}
    if getattr(args, "iterations", None) is not None:
        over["train"]["iterations"] = args.iterations
    if getattr(args, "seed", None) is not None:
        over["train"]["seed"] = args.seed
    if getattr(args, "dataset", None):
        over["dataset"]["path"] = args.dataset
    for name in ("width", "height", "n_images"):
        if getattr(args, name, None) is not None:
            over["dataset"][name] = getattr(args, name)
    defense = None
    if getattr(args, "defense_preset", None):
        defense = defense_preset(args.defense_preset).to_dict()
    if getattr(args, "defense", None):
        defense = dict(defense or {}, mode=args.defense)
    for flag, key in (("c", "c"), ("r", "r"), ("sigma_l", "sigma_l")):
        if getattr(args, flag, None) is not None:
            defense = dict(defense or {}, **{key: getattr(args, flag)})
    if defense:
        over["train"]["defense"] = defense
    if getattr(args, "scheme", None):
        over["attack"]["scheme"] = args.scheme
    if getattr(args, "ratio", None) is not None:
        over["attack"]["rho"] = "inf" if math.isinf(args.ratio) else args.ratio
    if getattr(args, "out", None):
        over["output"] = args.out
    return load_config(args.preset, args.config, over)


def _eval_poses(cfg: ExperimentConfig, dataset):
    idx = list(range(0, len(dataset.poses), cfg.eval.stride))
    return idx, [dataset.poses[i] for i in idx]


def _references(poses, width, height):
    scene = default_scene()
    return [oracle_render(p, scene, width, height) for p in poses]


def _save_renders(out: Path, prefix: str, renders, ids):
    rdir = ensure_dir(out / "renders")
    for pid, (color, depth) in zip(ids, renders):
        write_ppm(rdir / f"{prefix}_{pid:03d}_color.ppm", np.clip(color, 0, 1))
        peak = depth.max() if depth.max() > 0 else 1.0
        write_ppm(rdir / f"{prefix}_{pid:03d}_depth.ppm", np.repeat((depth / peak)[..., None], 3, axis=2))


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True))


def _emit_row(fields: dict) -> None:
    """One delimited summary line (header + values) on stdout."""
    w = csv.writer(sys.stdout)
    w.writerow(list(fields))
    w.writerow([f"{v:.6g}" if isinstance(v, float) else v for v in fields.values()])


def _build_model(cfg, path) -> NerfModel:
    rng = np.random.default_rng(0)
    server, client = ServerModel(cfg.model, rng), ClientModel(cfg.model, rng)
    server.load_state_dict(load_state(path, "server"))
    client_state = load_state(path, "client")
    if client_state:
        client = ClientModel(cfg.model, rng, color_layers=_color_layers(client_state))
        client.load_state_dict(client_state)
    return NerfModel(server, client)


def _color_layers(state: dict) -> int:
    return 1 + sum(1 for k in state if k.startswith("c") and k.endswith("w") and k[1:-1].isdigit())


# ---------------------------------------------------------------- commands


def cmd_gen_dataset(args) -> int:
    cfg = _config_from_args(args)
    ds = cfg.dataset.build()
    out = save_dataset(args.out, ds)
    _emit_row({"dataset": str(out), "images": len(ds), "width": ds.width, "height": ds.height})
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config_from_args(args)
    out = ensure_dir(cfg.output)
    ds = cfg.dataset.build()
    tc = cfg.train
    trace = TraceWriter(args.trace, tc.to_dict()) if args.trace else None
    hooks = [trace] if trace else []
    if args.mode == "mono":
        if trace:
            raise UsageError("--trace needs a split mode (the trace is what the server observes)")
        result = train_monolithic(tc, ds)
    elif args.mode == "split":
        result = train_split(tc, ds, transport="codec" if args.codec else "memory", hooks=hooks)
    else:
        address = (args.host, args.port) if args.port else None
        if address and trace:
            raise UsageError("--trace with an external server: pass --trace to `serve` instead")
        result = train_split(tc, ds, transport="tcp", hooks=hooks, address=address)
    if trace:
        trace.close()
    _write_json(out / "config.json", cfg.to_dict())
    sigmas = result.sigma_log or [0.0] * len(result.losses)
    wire = result.wire_bytes or [0] * len(result.losses)
    with open(out / "loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "loss", "sigma_t", "wire_bytes"])
        for t, (loss, s, b) in enumerate(zip(result.losses, sigmas, wire)):
            w.writerow([t, repr(loss), repr(float(s)), b])
    plotting.loss_figure({args.mode: result.losses}, out / "loss.png")
    if result.aborted:
        print(f"session aborted after {len(result.losses)} iterations: {result.error}", file=sys.stderr)
        return EXIT_RUNTIME
    summary = {"run": out.name, "mode": args.mode, "iterations": len(result.losses),
               "final_loss": float(np.mean(result.losses[-10:]))}
    if result.model.server is None:
        np.savez(out / "model.npz", **{f"client/{k}": v for k, v in result.model.client.state_dict().items()})
        summary["note"] = "server params stay with the server process"
    else:
        save_model(out / "model.npz", result.model)
        ids, poses = _eval_poses(cfg, ds)
        renders = render_views(result.model, poses, ds.width, ds.height, cfg.eval.n_samples)
        refs = _references(poses, ds.width, ds.height)
        report = metric_report(renders, refs, ids)
        _write_json(out / "metrics.json", report)
        _save_renders(out, "victim", renders, ids)
        plotting.render_grid({"oracle": [r[0] for r in refs], "model": [r[0] for r in renders],
                              "oracle depth": [r[1] for r in refs], "model depth": [r[1] for r in renders]},
                             out / "renders.png", ids)
        summary.update(report["mean"])
    _emit_row(summary)
    return EXIT_OK


def cmd_serve(args) -> int:
    listener = tcp_listen(args.host, args.port)
    host, port = listener.getsockname()
    print(f"listening {host}:{port}", flush=True)
    tr = tcp_accept(listener, timeout=args.timeout)
    session = server_session(tr)
    trace = None
    if args.trace:
        trace = TraceWriter(args.trace, lambda: session.config.to_dict())
        session.hooks.append(trace)
    try:
        serve(session)
    finally:
        tr.close()
        listener.close()
        if trace and session.config is not None:
            trace.close()
    if args.out:
        out = ensure_dir(args.out)
        np.savez(out / "model.npz", **{f"server/{k}": v for k, v in session.model.state_dict().items()})
        _write_json(out / "config.json", {"train": session.config.to_dict()})
    _emit_row({"served_iterations": session.t})
    return EXIT_OK


def cmd_attack(args) -> int:
    cfg = _config_from_args(args)
    out = ensure_dir(cfg.output)
    if args.trace:
        if not args.server_params:
            raise UsageError("--trace needs --server-params (the server's final model.npz)")
        atk, tc = replay_trace(args.trace, cfg.attack)
        server = ServerModel(tc.model, np.random.default_rng(0))
        server.load_state_dict(load_state(args.server_params, "server"))
        ds = cfg.dataset.build()
        victim = None
    else:
        tc = cfg.train
        ds = cfg.dataset.build()
        atk = SurrogateAttack(tc.model, cfg.attack, tc.iterations)
        result = train_split(tc, ds, hooks=[atk])
        if result.aborted:
            print(f"session aborted: {result.error}", file=sys.stderr)
            return EXIT_RUNTIME
        server, victim = result.model.server, result.model
    attacker = atk.compose(server)
    null = SurrogateAttack(tc.model, cfg.attack, tc.iterations).compose(server)
    ids, poses = _eval_poses(cfg, ds)
    refs = _references(poses, ds.width, ds.height)
    ns = cfg.eval.n_samples
    renders = render_views(attacker, poses, ds.width, ds.height, ns)
    report = metric_report(renders, refs, ids)
    null_renders = render_views(null, poses, ds.width, ds.height, ns)
    _write_json(out / "metrics.json", report)
    _write_json(out / "null_metrics.json", metric_report(null_renders, refs, ids))
    _write_json(out / "config.json", {**cfg.to_dict(), "train": tc.to_dict(), "kind": "attack"})
    save_model(out / "model.npz", attacker)
    with open(out / "attack_loss.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "l_surr", "l_g", "l_dummy", "lambda"])
        for i, h in enumerate(atk.history):
            w.writerow([i + 1, repr(h.l_surr), repr(h.l_g), repr(h.l_dummy), repr(h.lam)])
    _save_renders(out, "attack", renders, ids)
    rows = {"oracle": [r[0] for r in refs], "attacker": [r[0] for r in renders],
            "oracle depth": [r[1] for r in refs], "attacker depth": [r[1] for r in renders]}
    summary = {"run": out.name, "scheme": cfg.attack.scheme, "rho": cfg.attack.rho, **report["mean"]}
    if victim is not None:
        v_renders = render_views(victim, poses, ds.width, ds.height, ns)
        _write_json(out / "victim_metrics.json", metric_report(v_renders, refs, ids))
        rows["victim depth"] = [r[1] for r in v_renders]
    plotting.render_grid(rows, out / "renders.png", ids)
    plotting.loss_figure({"L_g": [h.l_g for h in atk.history], "L_dummy": [h.l_dummy for h in atk.history]},
                         out / "attack_loss.png", "attack losses")
    _emit_row(summary)
    return EXIT_OK


def cmd_scene_attack(args) -> int:
    src = Path(args.source)
    cfg_path = src / "config.json"
    if not cfg_path.exists():
        raise UsageError(f"{src} is not an attack output directory (no config.json)")
    saved = json.loads(cfg_path.read_text())
    saved.pop("kind", None)
    cfg = ExperimentConfig.from_dict(saved)
    model = _build_model(cfg.train, src / "model.npz")
    out = ensure_dir(args.out)
    leaked = []
    ds = None
    if args.leaked_index is not None:
        ds = cfg.dataset.build()
        for k in args.leaked_index:
            leaked.append((ds.images[k], ds.poses[k], f"image{k}"))
    for path in args.leaked or []:
        leaked.append((read_ppm(path), None, Path(path).stem))
    if not leaked:
        raise UsageError("give at least one --leaked image or --leaked-index")
    fov = {} if ds is None else {"hfov": ds.hfov, "vfov": ds.vfov}
    spec = PoseSearchSpec(x=args.x, h=math.radians(args.h_deg), v=math.radians(args.v_deg), **fov)
    ns = cfg.eval.n_samples
    found, rows = [], []
    for img, true_pose, name in leaked:
        h, w = img.shape[:2]
        res = pose_grid_search(img, model_renderer(model, w, h, ns, args.stride), spec,
                               refine=not args.no_refine, stride=args.stride)
        with open(out / f"search_{name}.csv", "w", newline="") as fh:
            wr = csv.writer(fh)
            wr.writerow(["candidate", "x", "y", "z", "phi", "theta", "ssim_gray"])
            wr.writerows(res.log)
        plotting.search_figure([r[-1] for r in res.log], out / f"search_{name}.png")
        found.append((img, res.pose))
        rows.append({"image": name, "candidates": len(res.log), "expected": search_space_size(spec),
                     "score": res.score, "pose": res.pose.to_dict(), "true_pose": true_pose and true_pose.to_dict()})
    eval_poses = [tp if tp is not None else fp for (_, tp, _), (_, fp) in zip(leaked, found)]

    def psnrs():
        return [psnr(np.clip(model_renderer(model, im.shape[1], im.shape[0], ns)(p), 0, 1), im)
                for (im, _, _), p in zip(leaked, eval_poses)]

    before = psnrs()
    scene_aided_finetune(model, found, args.steps, n_samples=ns, seed=cfg.attack.seed)
    after = psnrs()
    for row, b, a in zip(rows, before, after):
        row.update(psnr_before=b, psnr_after=a)
    _write_json(out / "scene_attack.json", {"spec": spec.__dict__, "images": rows})
    save_model(out / "model.npz", model)
    grid = {"leaked": [im for im, _, _ in leaked],
            "after": [np.clip(model_renderer(model, im.shape[1], im.shape[0], ns)(p), 0, 1)
                      for (im, _, _), p in zip(leaked, eval_poses)]}
    plotting.render_grid(grid, out / "renders.png", [r["image"] for r in rows])
    for r in rows:
        _emit_row({"image": r["image"], "candidates": r["candidates"], "score": r["score"],
                   "psnr_before": r["psnr_before"], "psnr_after": r["psnr_after"]})
    return EXIT_OK


REPORT_FIELDS = ("run", "kind", "ssim_depth", "ssim_gray", "psnr")


def collect_report(dirs) -> list[dict]:
    rows = []
    for d in dirs:
        d = Path(d)
        mpath = d / "metrics.json"
        if not mpath.exists():
            raise UsageError(f"{d} has no metrics.json")
        mean = json.loads(mpath.read_text())["mean"]
        kind = "train"
        cpath = d / "config.json"
        if cpath.exists():
            kind = json.loads(cpath.read_text()).get("kind", "train")
        rows.append({"run": d.name, "kind": kind, **{k: mean[k] for k in REPORT_FIELDS[2:]}})
    return sorted(rows, key=lambda r: r["run"])


def cmd_report(args) -> int:
    rows = collect_report(args.dirs)
    report = {"runs": rows}
    if args.out:
        out = ensure_dir(args.out)
        _write_json(out / "report.json", report)
        with open(out / "report.csv", "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=REPORT_FIELDS)
            w.writeheader()
            w.writerows(rows)
        if rows:
            plotting.metric_bars(rows, out / "report.png")
    w = csv.DictWriter(sys.stdout, fieldnames=REPORT_FIELDS)
    w.writeheader()
    w.writerows(rows)
    return EXIT_OK


# ---------------------------------------------------------------- parser


def _common(p, dataset=True):
    p.add_argument("--preset", default="desk", help=f"one of {', '.join(preset_names())}")
    p.add_argument("--config", help="JSON file merged over the preset")
    p.add_argument("--seed", type=int)
    p.add_argument("--iterations", type=int)
    if dataset:
        p.add_argument("--dataset", help="dataset directory (default: render the synthetic scene)")


def _defense_flags(p):
    p.add_argument("--defense", choices=MODES)
    p.add_argument("--defense-preset", help="named defense, e.g. paper-best")
    p.add_argument("--c", type=float)
    p.add_argument("--r", type=float)
    p.add_argument("--sigma-l", dest="sigma_l", type=float)


def build_parser() -> argparse.ArgumentParser:
    ap = _Parser(prog="splitfield", description=__doc__)
    ap.add_argument("-v", "--verbose", action="store_true", help="log per-iteration details")
    sub = ap.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-dataset", help="render the synthetic scene from a pose ring")
    _common(p, dataset=False)
    p.add_argument("--out", required=True)
    p.add_argument("--width", type=int)
    p.add_argument("--height", type=int)
    p.add_argument("--n-images", dest="n_images", type=int)
    p.set_defaults(func=cmd_gen_dataset)

    p = sub.add_parser("train", help="train a NeRF (monolithic or split)")
    _common(p)
    _defense_flags(p)
    p.add_argument("--mode", choices=("mono", "split", "split-tcp"), default="split")
    p.add_argument("--codec", action="store_true", help="in-process split through the f32 wire codec")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, help="connect to an external `serve` process")
    p.add_argument("--trace", help="record the server's view of the session to this file")
    p.add_argument("--out")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("serve", help="run the server party over TCP")
    p.add_argument("--host", default="127.0.0.1")
    p.add_argument("--port", type=int, default=0)
    p.add_argument("--timeout", type=float, default=600.0)
    p.add_argument("--trace")
    p.add_argument("--out")
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("attack", help="surrogate model attack on a trace or a live session")
    _common(p)
    _defense_flags(p)
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--trace")
    src.add_argument("--live", action="store_true")
    p.add_argument("--server-params", dest="server_params")
    p.add_argument("--scheme", choices=("inv10", "pow01", "pow0001"))
    p.add_argument("--ratio", type=_float_or_inf, help="loss ratio rho; 'inf' matches gradients only")
    p.add_argument("--out")
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("scene-attack", help="pose grid search plus fine-tuning on leaked images")
    p.add_argument("--from", dest="source", required=True, help="output directory of `attack`")
    p.add_argument("--leaked", nargs="*", help="leaked PPM images")
    p.add_argument("--leaked-index", dest="leaked_index", type=int, nargs="*",
                   help="use dataset images by index (their true poses are then known)")
    p.add_argument("--x", type=float, default=0.5, help="location granularity")
    p.add_argument("--h-deg", dest="h_deg", type=float, default=69.0)
    p.add_argument("--v-deg", dest="v_deg", type=float, default=42.0)
    p.add_argument("--no-refine", action="store_true")
    p.add_argument("--stride", type=int, default=3, help="score candidates on every n-th pixel")
    p.add_argument("--steps", type=int, default=300, help="fine-tuning steps")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_scene_attack)

    p = sub.add_parser("report", help="compare metric reports of several runs")
    p.add_argument("dirs", nargs="*")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)
    return ap


def main(argv=None) -> int:
    ap = build_parser()
    try:
        args = ap.parse_args(argv)
    except SystemExit as exc:  # --help, or a usage error already reported by the parser
        return exc.code
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, ConfigError, MetricError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except (OSError, DatasetError, ConnectionError, TimeoutError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
