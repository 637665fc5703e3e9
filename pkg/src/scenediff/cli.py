"""Command-line entry point.

Subcommands: gen-playground, extract-events, analyze-threshold,
make-guidance, train, sample, eval, render. Every command is
deterministic given --seed. Exit codes: 0 success, 1 usage error,
2 data/format error, 3 numerical abort.

Heavy imports happen inside the command handlers so the SCENEDIFF_THREADS
cap can be applied to the BLAS thread pools before numpy loads.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from pathlib import Path

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_DATA = 2
EXIT_NUMERIC = 3

SCHEDULE_KEYS = {"S": 50, "S_d": 10, "zeta": 5, "beta_min": 1e-4,
                 "beta_max": 0.5, "extra_step_at_one": True}
TRAIN_KEYS = {"lambda": 0.1, "cfg_dropout": 0.25, "lr": 1e-3, "halve_every": 20,
              "epochs": 100, "batch": 16, "task": "future", "t_obs": 10,
              "guidance_mode": "none", "loss_on_observed": False, "seed": 0}
MODEL_KEYS = {"hidden": 256, "heads": 8, "ff_dim": 1024, "n_rdb": 2,
              "social_layers_per_stb": 2, "step_emb_dim": 128, "d_text": 768}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def load_run_config(path) -> dict:
    """Flat JSON config; unknown keys are rejected by name."""
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ValueError(f"{path}: cannot read config ({exc})") from exc
    known = {**SCHEDULE_KEYS, **TRAIN_KEYS, **MODEL_KEYS}
    for key in raw:
        if key not in known:
            raise ValueError(f"{path}: unknown config key {key!r}")
    merged = dict(known)
    merged.update(raw)
    return merged


def _scene_dirs(root: Path) -> list[Path]:
    dirs = sorted(p for p in root.iterdir() if (p / "meta.json").exists())
    if not dirs:
        raise ValueError(f"{root}: no scene bundles found")
    return dirs


def _load_scenes(root: Path):
    from .scene import load_bundle
    dirs = _scene_dirs(root)
    return dirs, [load_bundle(d) for d in dirs]


def _guidance_for(scene, bundle_dir, mode: str):
    from . import guidance as gd
    from .scene import TextGuidance, load_caption, load_text_embedding, load_wpg
    if mode == "none":
        return None
    if mode == "wpg":
        seq = load_wpg(bundle_dir)
        if seq is None:
            seq = gd.extract_wpg(scene.E)
        if not seq:
            return None
        return gd.encode_wpg(seq, scene.meta.N)
    if mode == "text":
        emb = load_text_embedding(bundle_dir)
        if emb is None:
            caption = load_caption(bundle_dir)
            if caption is None:
                caption = gd.dense_caption(scene).text
            emb = gd.embed_text(caption)
        import numpy as np
        return TextGuidance(embedding=np.ascontiguousarray(emb))
    raise ValueError(f"unknown guidance mode {mode!r}")


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_gen_playground(args) -> int:
    from .playground import PlaygroundConfig, generate_dataset
    cfg = PlaygroundConfig(N=args.n, T=args.t)
    paths = generate_dataset(cfg, args.scenes, args.seed, args.out)
    print(f"wrote {len(paths)} bundles to {args.out}")
    return EXIT_OK


def cmd_extract_events(args) -> int:
    import numpy as np
    from .guidance import extract_possessor
    from .scene import load_bundle
    dirs = _scene_dirs(Path(args.in_dir))
    for d in dirs:
        scene = load_bundle(d)
        E = extract_possessor(scene.Y, args.threshold)
        (d / "events.u16le").write_bytes(E.astype("<u2").tobytes())
    print(f"extracted events for {len(dirs)} bundles")
    return EXIT_OK


def cmd_analyze_threshold(args) -> int:
    from .guidance import analyze_threshold
    _, scenes = _load_scenes(Path(args.in_dir))
    report = analyze_threshold(scenes, args.min, args.max, args.step)
    out = Path(args.out or (Path(args.in_dir) / "threshold_report.json"))
    out.write_text(json.dumps(report.to_dict(), sort_keys=True, indent=1),
                   encoding="utf-8")
    print(f"argmin threshold: {report.argmin_threshold}  ({out})")
    return EXIT_OK


def cmd_make_guidance(args) -> int:
    import numpy as np
    from . import guidance as gd
    from .scene import load_bundle, load_caption, write_embedding_file
    dirs = _scene_dirs(Path(args.in_dir))
    for d in dirs:
        scene = load_bundle(d)
        if args.mode == "wpg":
            (d / "wpg.json").write_text(
                json.dumps(gd.extract_wpg(scene.E)), encoding="utf-8")
        elif args.mode == "caption":
            (d / "caption.txt").write_text(gd.dense_caption(scene).text,
                                           encoding="utf-8")
        elif args.mode == "textemb-stub":
            caption = load_caption(d) or gd.dense_caption(scene).text
            write_embedding_file(d / "textemb.f32le", gd.embed_text(caption))
        else:
            raise ValueError(f"unknown guidance mode {args.mode!r}")
    print(f"wrote {args.mode} guidance for {len(dirs)} bundles")
    return EXIT_OK


def cmd_train(args) -> int:
    import numpy as np
    from .checkpoint import save_checkpoint
    from .denoiser import Denoiser, DenoiserConfig
    from .scene import make_task_mask
    from .schedule import build_joint
    from .training import TrainConfig, prepare_items, train

    cfg = load_run_config(args.config) if args.config else \
        {**SCHEDULE_KEYS, **TRAIN_KEYS, **MODEL_KEYS}
    if args.task:
        cfg["task"] = args.task
    if args.guidance:
        cfg["guidance_mode"] = args.guidance
    if args.epochs is not None:
        cfg["epochs"] = args.epochs
    if args.seed is not None:
        cfg["seed"] = args.seed

    dirs, scenes = _load_scenes(Path(args.data))
    T, N = scenes[0].meta.T, scenes[0].meta.N
    for d, sc in zip(dirs, scenes):
        if (sc.meta.T, sc.meta.N) != (T, N):
            raise ValueError(f"{d}: scene dims ({sc.meta.T}, {sc.meta.N}) "
                             f"differ from ({T}, {N})")
    mask = make_task_mask(cfg["task"], T, N, cfg["t_obs"])
    guidances = [_guidance_for(sc, d, cfg["guidance_mode"])
                 for sc, d in zip(scenes, dirs)]
    items = prepare_items(scenes, [mask] * len(scenes), guidances)

    sched = build_joint(cfg["beta_min"], cfg["beta_max"], cfg["S"], cfg["S_d"])
    model_cfg = DenoiserConfig(
        N=N, T=T, hidden=cfg["hidden"], heads=cfg["heads"], ff_dim=cfg["ff_dim"],
        n_rdb=cfg["n_rdb"], social_layers_per_stb=cfg["social_layers_per_stb"],
        step_emb_dim=cfg["step_emb_dim"], d_text=cfg["d_text"],
        guidance_mode=cfg["guidance_mode"], max_step=cfg["S"])
    model = Denoiser(model_cfg, np.random.default_rng(cfg["seed"]))
    tc = TrainConfig(
        lambda_vb=cfg["lambda"], cfg_dropout=cfg["cfg_dropout"], lr=cfg["lr"],
        halve_every=cfg["halve_every"], epochs=cfg["epochs"], batch=cfg["batch"],
        task=cfg["task"], t_obs=cfg["t_obs"], guidance_mode=cfg["guidance_mode"],
        loss_on_observed=cfg["loss_on_observed"], seed=cfg["seed"])

    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    log_path = out.with_suffix(out.suffix + ".log.jsonl")
    log_path.unlink(missing_ok=True)
    reports = train(items, model, tc, sched, log_path=log_path)
    schedule_info = {k: cfg[k] for k in SCHEDULE_KEYS}
    save_checkpoint(out, model, schedule_info,
                    extra={"task": cfg["task"], "t_obs": cfg["t_obs"],
                           "seed": cfg["seed"]})
    print(f"trained {len(reports)} epochs; final weighted loss "
          f"{reports[-1]['mean_weighted_loss']:.5f}; checkpoint {out}")
    return EXIT_OK


def cmd_sample(args) -> int:
    import numpy as np
    from .checkpoint import load_checkpoint
    from .sampler import ModeSet, SampleRequest, sample
    from .scene import make_task_mask, save_bundle, write_embedding_file
    from .schedule import build_joint, ddim_step_list

    model, header = load_checkpoint(args.ckpt)
    sch = header["schedule"]
    sched = build_joint(sch["beta_min"], sch["beta_max"], sch["S"], sch["S_d"])
    steps = tuple(ddim_step_list(sch["S"], args.zeta or sch["zeta"],
                                 sch["extra_step_at_one"]))
    task = args.task or header["extra"].get("task", "future")
    t_obs = args.t_obs or header["extra"].get("t_obs", 10)
    guidance_mode = args.guidance or "none"

    dirs, scenes = _load_scenes(Path(args.data))
    out_root = Path(args.out)
    out_root.mkdir(parents=True, exist_ok=True)
    n_passes = len(steps) - 1
    for d, scene in zip(dirs, scenes):
        mask = make_task_mask(task, scene.meta.T, scene.meta.N, t_obs)
        g = _guidance_for(scene, d, guidance_mode)
        req = SampleRequest(scene=scene, mask=mask, guidance=g,
                            modes=args.modes, seed=args.seed, step_list=steps)
        result = sample(model, req, sched, record_entropy=args.entropy)
        scene_out = out_root / d.name
        for k, mode_scene in enumerate(result.scenes):
            mdir = scene_out / f"mode_{k:02d}"
            save_bundle(mode_scene, mdir)
            write_embedding_file(mdir / "eprobs.f32le", result.event_probs[k])
        manifest = {
            "task": task, "t_obs": t_obs, "modes": args.modes,
            "seed": args.seed, "step_list": list(steps),
            "network_passes_per_mode": n_passes,
            "guidance_mode": guidance_mode,
            "guidance_hash": _guidance_hash(g),
        }
        (scene_out / "modes.json").write_text(
            json.dumps(manifest, sort_keys=True, indent=1), encoding="utf-8")
        if args.entropy and result.entropy_bits is not None:
            (scene_out / "entropy.json").write_text(
                json.dumps({"steps": list(steps[:-1]),
                            "entropy_bits": [float(v) for v in result.entropy_bits]},
                           sort_keys=True, indent=1), encoding="utf-8")
    print(f"sampled {args.modes} modes x {len(dirs)} scenes "
          f"({n_passes} network passes per mode) into {out_root}")
    return EXIT_OK


def _guidance_hash(g) -> str | None:
    import hashlib
    from .scene import TextGuidance, WpgGuidance
    if g is None:
        return None
    if isinstance(g, WpgGuidance):
        payload = b"wpg" + g.onehot.astype("<f4").tobytes()
    elif isinstance(g, TextGuidance):
        payload = b"text" + g.embedding.astype("<f4").tobytes()
    else:
        return None
    return hashlib.blake2b(payload, digest_size=8).hexdigest()


def cmd_eval(args) -> int:
    import numpy as np
    from . import metrics as mt
    from .scene import load_bundle, make_task_mask, read_embedding_file
    wanted = [m.strip() for m in args.metrics.split(",") if m.strip()]
    for m in wanted:
        if m not in mt.METRIC_NAMES:
            raise ValueError(f"unknown metric {m!r} (choose from {mt.METRIC_NAMES})")

    truth_root, pred_root = Path(args.truth), Path(args.pred)
    truth_dirs = _scene_dirs(truth_root)
    per_scene = []
    bade_modes, bade_truths, bade_masks = [], [], []
    units = ""
    for td in truth_dirs:
        pd = pred_root / td.name
        if not (pd / "modes.json").exists():
            raise ValueError(f"{pd}: missing modes.json for scene {td.name}")
        manifest = json.loads((pd / "modes.json").read_text(encoding="utf-8"))
        truth = load_bundle(td)
        units = truth.meta.units
        mask = make_task_mask(manifest["task"], truth.meta.T, truth.meta.N,
                              manifest["t_obs"])
        eval_mask = mask.M == 0
        mode_dirs = sorted(pd.glob("mode_*"))
        modes = np.stack([load_bundle(md).Y for md in mode_dirs])
        row: dict = {"scene": td.name}
        if "sade" in wanted or "sfde" in wanted:
            mn, av, fmn, fav = mt.sade_sfde(modes, truth.Y, eval_mask)
            if "sade" in wanted:
                row.update(minSADE=mn, avgSADE=av)
            if "sfde" in wanted:
                row.update(minSFDE=fmn, avgSFDE=fav)
        if "ade" in wanted or "fde" in wanted:
            mn, av, fmn, fav = mt.ade_fde(modes, truth.Y, eval_mask)
            if "ade" in wanted:
                row.update(minADE=mn, avgADE=av)
            if "fde" in wanted:
                row.update(minFDE=fmn, avgFDE=fav)
        if "acc" in wanted:
            probs = np.stack([read_embedding_file(md / "eprobs.f32le")
                              for md in mode_dirs])
            frames = eval_mask.any(axis=1)
            if args.acc_full_horizon:
                frames = np.ones_like(frames)
            mx, av = mt.possessor_accuracy(probs, truth.E, frames)
            row.update(maxAcc=mx, avgAcc=av)
        if "bade" in wanted:
            bade_modes.append(modes)
            bade_truths.append(truth.Y)
            bade_masks.append(mask.M)
        per_scene.append(row)
    min_bade = mt.bade(bade_modes, bade_truths, bade_masks) if bade_modes else None
    report = mt.aggregate_report(per_scene, units, min_bade)
    jpath, tpath = mt.emit_report(report, args.out or pred_root)
    print(tpath.read_text(encoding="utf-8"))
    return EXIT_OK


def cmd_render(args) -> int:
    from .render import render_scene_svg
    from .scene import load_bundle, make_task_mask
    scene = load_bundle(args.scene)
    mask = None
    if args.task:
        mask = make_task_mask(args.task, scene.meta.T, scene.meta.N, args.t_obs).M
    out = render_scene_svg(scene, args.out, mask=mask)
    print(f"wrote {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="scenediff",
                description="joint trajectory/event diffusion pipeline")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-playground", help="generate synthetic scenes")
    g.add_argument("--out", required=True)
    g.add_argument("--scenes", type=int, required=True)
    g.add_argument("--seed", type=int, required=True)
    g.add_argument("--t", type=int, default=20)
    g.add_argument("--n", type=int, default=4)
    g.set_defaults(func=cmd_gen_playground)

    e = sub.add_parser("extract-events", help="recompute possession events")
    e.add_argument("--in", dest="in_dir", required=True)
    e.add_argument("--threshold", type=float, default=1.5)
    e.set_defaults(func=cmd_extract_events)

    a = sub.add_parser("analyze-threshold", help="possession threshold sweep")
    a.add_argument("--in", dest="in_dir", required=True)
    a.add_argument("--min", type=float, default=0.0)
    a.add_argument("--max", type=float, default=3.0)
    a.add_argument("--step", type=float, default=0.1)
    a.add_argument("--out")
    a.set_defaults(func=cmd_analyze_threshold)

    m = sub.add_parser("make-guidance", help="derive guidance files")
    m.add_argument("--in", dest="in_dir", required=True)
    m.add_argument("--mode", choices=["wpg", "caption", "textemb-stub"],
                   required=True)
    m.set_defaults(func=cmd_make_guidance)

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--task", choices=["future", "imputation"])
    t.add_argument("--guidance", choices=["none", "wpg", "text"])
    t.add_argument("--epochs", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--out", required=True)
    t.set_defaults(func=cmd_train)

    s = sub.add_parser("sample", help="generate completions")
    s.add_argument("--ckpt", required=True)
    s.add_argument("--data", required=True)
    s.add_argument("--modes", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--guidance", choices=["none", "wpg", "text"])
    s.add_argument("--task", choices=["future", "imputation"])
    s.add_argument("--t-obs", type=int, dest="t_obs")
    s.add_argument("--zeta", type=int)
    s.add_argument("--entropy", action="store_true")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_sample)

    v = sub.add_parser("eval", help="score predictions against truth")
    v.add_argument("--pred", required=True)
    v.add_argument("--truth", required=True)
    v.add_argument("--metrics", default="sade,sfde,ade,fde,acc")
    v.add_argument("--acc-full-horizon", action="store_true")
    v.add_argument("--out")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("render", help="render a scene bundle to SVG")
    r.add_argument("--scene", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--task", choices=["future", "imputation"])
    r.add_argument("--t-obs", type=int, dest="t_obs", default=10)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None) -> int:
    threads = os.environ.get("SCENEDIFF_THREADS")
    if threads:
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ.setdefault(var, threads)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (ValueError, KeyError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ArithmeticError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
