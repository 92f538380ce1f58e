"""Command-line pipeline: fit, plan, generate, invert, evaluate, train, demo.

Every command is deterministic given --seed.  Exit codes: 0 success, 1 runtime
error (missing files, bad flags, backend failures), 2 bad input data
(unparseable primitives/scenes, malformed images, empty masks).
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

import numpy as np

from . import figures
from .config import ConfigError, PipelineConfig, load_config, serialize_config
from .diffusion import (
    cosine_schedule,
    ddim_invert,
    image_to_tensor,
    load_toy_denoiser,
    make_synthetic_dataset,
    save_feature_dump,
    save_toy_denoiser,
    tensor_to_image,
    train_toy_denoiser,
)
from .evaluate import evaluate_layout_adherence
from .guidance import guided_sample, prepare_guidance_context
from .imageio import ImageFormatError, read_pgm, read_ppm, write_pgm, write_ppm
from .pathclip import (
    AppearanceDescription,
    LayoutScene,
    PathClipError,
    PathClipPrimitive,
    SceneFormatError,
    polygon_iou,
    rasterize,
    scene_from_json,
    scene_to_json,
)
from .planner import (
    DEFAULT_EXEMPLARS,
    DEFAULT_INSTRUCTION,
    BlockParseError,
    MockBackend,
    NoPrimitivesFound,
    RemoteBackend,
    build_prompt,
    parse_response,
    validate_scene,
)
from .polyfit import EmptyMask, PsoConfig, fit_polygon, fit_scene

BAD_INPUT_ERRORS = (
    EmptyMask,
    SceneFormatError,
    ImageFormatError,
    PathClipError,
    BlockParseError,
    NoPrimitivesFound,
)

# demo experiment sizes: 50 fresh two-object scenes scored at 3 generation seeds
DEMO_ADHERENCE_SCENES = 50
DEMO_EVAL_SEEDS = 3
DEMO_SCENE_SEED = 303
DEMO_CONDITION_SEED = 101


def _emit(obj: dict) -> None:
    print(json.dumps(obj))


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _scene_out_path(args) -> Path:
    out = Path(args.out)
    if out.suffix == ".json":
        out.parent.mkdir(parents=True, exist_ok=True)
        return out
    out.mkdir(parents=True, exist_ok=True)
    return out / "scene.json"


def _load_denoiser(args, cfg: PipelineConfig):
    weights = Path(getattr(args, "weights", None) or cfg.weights)
    if not weights.is_file():
        raise FileNotFoundError(f"denoiser weights not found: {weights}")
    model = load_toy_denoiser(weights)
    model.use_attention_masks = cfg.attention_masks
    return model


# ---------------------------------------------------------------------------
# commands


def cmd_fit(args, cfg: PipelineConfig) -> int:
    masks = [read_pgm(p) for p in args.mask]
    captions = list(args.caption or [])
    while len(captions) < len(masks):
        captions.append("object")
    captions = captions[: len(masks)]
    if args.k:
        pso = cfg.to_pso_config(k=args.k)
        prims = []
        for i, (mask, caption) in enumerate(zip(masks, captions)):
            params, iou = fit_polygon(mask, dataclasses.replace(pso, seed=pso.seed + i))
            prims.append(
                PathClipPrimitive(
                    path=params, appearance=AppearanceDescription(tuple(caption.split()))
                )
            )
            _emit({"mask": str(args.mask[i]), "k": args.k, "iou": iou})
        scene = LayoutScene(
            canvas_w=masks[0].width,
            canvas_h=masks[0].height,
            global_caption=" ".join(captions),
            primitives=tuple(prims),
        )
    else:
        scene = fit_scene(masks, captions, cfg.to_pso_config(k=4))
        scene = dataclasses.replace(scene, global_caption=" ".join(captions))
        for i, (mask, prim) in enumerate(zip(masks, scene.primitives)):
            achieved = polygon_iou(rasterize(prim, mask.width, mask.height), mask)
            _emit(
                {
                    "mask": str(args.mask[i]),
                    "k": len(prim.path.clip_points),
                    "iou": achieved,
                }
            )
    scene_path = _scene_out_path(args)
    scene_path.write_text(scene_to_json(scene), encoding="utf-8")
    fig = figures.save_polygon_overlay(None, scene, scene_path.parent / "fit_overlay.png")
    _emit({"scene": str(scene_path), "figure": str(fig)})
    return 0


def cmd_plan(args, cfg: PipelineConfig) -> int:
    if cfg.planner_backend == "mock":
        backend = MockBackend(cfg.planner_fixtures)
    elif cfg.planner_backend == "remote":
        backend = RemoteBackend.from_env(max_tokens=cfg.planner_max_tokens)
    else:
        raise ValueError(f"unknown planner backend {cfg.planner_backend!r}")
    prompt = build_prompt(args.prompt, DEFAULT_EXEMPLARS, DEFAULT_INSTRUCTION)
    response = backend.complete(prompt)
    scene = parse_response(response, cfg.canvas, cfg.canvas, caption=args.prompt)
    for w in validate_scene(scene):
        _emit({"warning": w.kind, "message": w.message})
    scene_path = _scene_out_path(args)
    scene_path.write_text(scene_to_json(scene), encoding="utf-8")
    fig = figures.save_polygon_overlay(None, scene, scene_path.parent / "plan_overlay.png")
    _emit({"scene": str(scene_path), "primitives": len(scene.primitives), "figure": str(fig)})
    return 0


def cmd_generate(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    scene = scene_from_json(Path(args.scene).read_text(encoding="utf-8"))
    condition = read_ppm(args.condition) if args.condition else None
    model = _load_denoiser(args, cfg)
    schedule = cosine_schedule(cfg.steps_sample)
    model.schedule = schedule
    x0, diagnostics = guided_sample(
        model, scene, condition, cfg.to_guidance_config(), schedule, cfg.seed
    )
    image = tensor_to_image(x0)
    image_path = out / "generated.ppm"
    write_ppm(image_path, image)
    diag_path = out / "diagnostics.jsonl"
    with open(diag_path, "w", encoding="utf-8") as fh:
        for entry in diagnostics:
            fh.write(json.dumps(entry) + "\n")
    energy_fig = figures.save_energy_curves(diagnostics, out / "energy_curves.png")
    overlay_fig = figures.save_polygon_overlay(image, scene, out / "generated_overlay.png")
    _emit(
        {
            "image": str(image_path),
            "diagnostics": str(diag_path),
            "guided_steps": len(diagnostics),
            "figures": [str(energy_fig), str(overlay_fig)],
        }
    )
    return 0


def cmd_invert(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    image = read_ppm(args.image)
    model = _load_denoiser(args, cfg)
    schedule = cosine_schedule(cfg.steps_invert)
    model.schedule = schedule
    x_T, traj = ddim_invert(
        image_to_tensor(image), model, model.null_conditioning(), schedule
    )
    feat_path = out / "features.bin"
    save_feature_dump(traj, feat_path)
    noise_path = out / "x_T.npy"
    np.save(noise_path, x_T.numpy())
    norms = [float(x.norm()) for _, x, _ in traj.entries]
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(4.0, 2.6))
    ax.plot(range(len(norms)), norms, lw=1.2)
    ax.set_xlabel("t")
    ax.set_ylabel("|x_t|")
    trace_path = out / "inversion_trace.png"
    fig.tight_layout()
    fig.savefig(trace_path)
    plt.close(fig)
    _emit({"features": str(feat_path), "noise": str(noise_path), "figure": str(trace_path)})
    return 0


def cmd_evaluate(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    image = read_ppm(args.image)
    scene = scene_from_json(Path(args.scene).read_text(encoding="utf-8"))
    report = evaluate_layout_adherence(
        image, scene, tolerance=cfg.iou_tolerance, min_component_area=cfg.min_component_area
    )
    report_path = out / "report.json"
    report_path.write_text(json.dumps(report.as_dict(), indent=2), encoding="utf-8")
    fig = figures.save_adherence_summary(report, out / "adherence.png")
    _emit({**report.as_dict(), "report": str(report_path), "figure": str(fig)})
    return 0


def cmd_train(args, cfg: PipelineConfig) -> int:
    out = _out_dir(args)
    dataset = make_synthetic_dataset(
        args.samples or cfg.train_samples, cfg.seed, canvas=cfg.canvas
    )
    model = train_toy_denoiser(
        dataset,
        epochs=args.epochs or cfg.train_epochs,
        seed=cfg.seed,
        schedule=cosine_schedule(cfg.steps_sample),
        batch_size=cfg.batch_size,
        lr=cfg.lr,
        momentum=cfg.momentum,
        caption_dropout=cfg.caption_dropout,
        channels=cfg.channels,
    )
    weights_path = out / Path(cfg.weights).name
    save_toy_denoiser(model, weights_path)
    fusion_path = out / "fusion.bin"
    model.fusion.save(fusion_path)
    losses = model.train_stats["epoch_losses"]
    loss_fig = figures.save_loss_curve(losses, out / "loss_curve.png")
    grid_fig = figures.save_image_grid(
        [img for img, _ in dataset[:16]], out / "dataset_grid.png"
    )
    _emit(
        {
            "weights": str(weights_path),
            "fusion": str(fusion_path),
            "final_loss": losses[-1],
            "figures": [str(loss_fig), str(grid_fig)],
        }
    )
    return 0


def cmd_demo(args, cfg: PipelineConfig) -> int:
    start = time.monotonic()
    out = _out_dir(args)
    dataset = make_synthetic_dataset(16, cfg.seed, canvas=cfg.canvas)
    grid_fig = figures.save_image_grid([img for img, _ in dataset], out / "dataset_grid.png")

    # polygon fitting on one sample mask
    sample_img, sample_scene = dataset[0]
    mask = rasterize(sample_scene.primitives[0], cfg.canvas, cfg.canvas)
    write_pgm(out / "demo_mask.pgm", mask)
    params, iou = fit_polygon(mask, cfg.to_pso_config(k=len(sample_scene.primitives[0].path.clip_points)))
    _emit({"stage": "fit", "iou": iou})
    fit_fig = figures.save_polygon_overlay(sample_img, sample_scene, out / "fit_overlay.png")

    # denoiser: reuse weights when present, train otherwise
    weights = Path(args.weights or cfg.weights)
    if weights.is_file():
        model = load_toy_denoiser(weights)
        trained_here = False
    else:
        train_set = make_synthetic_dataset(cfg.train_samples, cfg.seed, canvas=cfg.canvas)
        model = train_toy_denoiser(
            train_set,
            epochs=cfg.train_epochs,
            seed=cfg.seed,
            schedule=cosine_schedule(cfg.steps_sample),
            batch_size=cfg.batch_size,
            lr=cfg.lr,
            momentum=cfg.momentum,
            caption_dropout=cfg.caption_dropout,
            channels=cfg.channels,
        )
        weights = out / Path(cfg.weights).name
        save_toy_denoiser(model, weights)
        trained_here = True
    model.use_attention_masks = cfg.attention_masks
    _emit({"stage": "weights", "path": str(weights), "trained": trained_here})

    schedule = cosine_schedule(cfg.steps_sample)
    model.schedule = schedule
    gcfg = cfg.to_guidance_config()

    # layout adherence: caption+layout-conditioned generation (no spatial
    # condition image) over fresh 2-object scenes, median per seed
    scenes = make_synthetic_dataset(
        DEMO_ADHERENCE_SCENES,
        DEMO_SCENE_SEED + cfg.seed,
        canvas=cfg.canvas,
        min_primitives=2,
        max_primitives=2,
    )
    per_seed = []
    for r in range(DEMO_EVAL_SEEDS):
        precs, recs = [], []
        for i, (_, scene) in enumerate(scenes):
            x0, _ = guided_sample(
                model, scene, None, gcfg, schedule, cfg.seed + 1000 * r + i
            )
            rep = evaluate_layout_adherence(
                tensor_to_image(x0),
                scene,
                tolerance=cfg.iou_tolerance,
                min_component_area=cfg.min_component_area,
            )
            precs.append(rep.precision)
            recs.append(rep.recall)
        per_seed.append(
            {
                "seed": cfg.seed + 1000 * r,
                "precision": float(np.median(precs)),
                "recall": float(np.median(recs)),
            }
        )
        _emit({"stage": "adherence", **per_seed[-1]})
    adherence = {
        "scenes": DEMO_ADHERENCE_SCENES,
        "per_seed": per_seed,
        "precision": float(np.median([s["precision"] for s in per_seed])),
        "recall": float(np.median([s["recall"] for s in per_seed])),
    }
    adherence_fig = figures.save_adherence_batch(per_seed, out / "adherence.png")

    # structure guidance: paired guided/measured runs on one scene conditioned
    # on its own render; the pair shares auxiliary runs, basis, and inversion
    target_img, target_scene = make_synthetic_dataset(
        1, DEMO_CONDITION_SEED + cfg.seed, canvas=cfg.canvas, min_primitives=2, max_primitives=2
    )[0]
    write_ppm(out / "condition.ppm", target_img)
    pair_seed = 1000 + cfg.seed
    ctx = prepare_guidance_context(model, target_scene, target_img, gcfg, schedule, pair_seed)
    x0, diag_guided = guided_sample(
        model, target_scene, target_img, gcfg, schedule, pair_seed, context=ctx
    )
    _, diag_measured = guided_sample(
        model, target_scene, target_img, gcfg, schedule, pair_seed, measure_only=True, context=ctx
    )
    image = tensor_to_image(x0)
    write_ppm(out / "generated.ppm", image)
    with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
        for entry in diag_guided:
            fh.write(json.dumps(entry) + "\n")
    energy_fig = figures.save_energy_curves(
        diag_guided, out / "energy_curves.png", reference=diag_measured
    )
    gen_fig = figures.save_polygon_overlay(image, target_scene, out / "generated_overlay.png")
    final_unguided = diag_measured[-1]["g_sf"]
    structure = {
        "final_g_sf_guided": diag_guided[-1]["g_sf"],
        "final_g_sf_unguided": final_unguided,
        "suppression_ratio": (
            diag_guided[-1]["g_sf"] / final_unguided if final_unguided > 0.0 else None
        ),
    }
    _emit({"stage": "structure", **structure})

    report = {"fit_iou": iou, "adherence": adherence, "structure_guidance": structure}
    (out / "report.json").write_text(json.dumps(report, indent=2), encoding="utf-8")
    elapsed = time.monotonic() - start
    (out / "runtime.json").write_text(json.dumps({"seconds": elapsed}), encoding="utf-8")
    _emit(
        {
            "stage": "done",
            "seconds": round(elapsed, 2),
            "precision": adherence["precision"],
            "recall": adherence["recall"],
            "figures": [str(f) for f in (grid_fig, fit_fig, adherence_fig, energy_fig, gen_fig)],
        }
    )
    return 0


def cmd_config(args, cfg: PipelineConfig) -> int:
    print(serialize_config(cfg), end="")
    return 0


# ---------------------------------------------------------------------------
# parser and entry point


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polyclip",
        description="Polygon-primitive layout planning, fitting, and guided toy diffusion.",
    )
    parser.add_argument("--config", help="path to a key = value config file")
    parser.add_argument("--seed", type=int, default=None, help="override the config seed")
    parser.add_argument("--out", default="out", help="output directory (or scene.json for fit/plan)")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit polygons to PGM masks")
    p.add_argument("--mask", action="append", required=True, help="binary PGM mask (repeatable)")
    p.add_argument("--caption", action="append", help="appearance text per mask (repeatable)")
    p.add_argument("--k", type=int, default=0, help="fixed vertex count (default: choose per mask)")

    p = sub.add_parser("plan", help="turn a text prompt into a scene via the planner backend")
    p.add_argument("--prompt", required=True)

    p = sub.add_parser("generate", help="guided generation from a scene JSON")
    p.add_argument("--scene", required=True)
    p.add_argument("--condition", help="optional spatial-condition PPM")
    p.add_argument("--weights", help="denoiser weights (default: config `weights`)")

    p = sub.add_parser("invert", help="DDIM-invert a PPM image, dumping features")
    p.add_argument("--image", required=True)
    p.add_argument("--weights")

    p = sub.add_parser("evaluate", help="layout adherence of an image against a scene")
    p.add_argument("--image", required=True)
    p.add_argument("--scene", required=True)

    p = sub.add_parser("train", help="train the toy denoiser on synthetic scenes")
    p.add_argument("--samples", type=int, default=0)
    p.add_argument("--epochs", type=int, default=0)

    p = sub.add_parser("demo", help="end-to-end pipeline demo into one directory")
    p.add_argument("--weights", help="reuse existing denoiser weights")

    sub.add_parser("config", help="print the effective configuration")
    return parser


COMMANDS = {
    "fit": cmd_fit,
    "plan": cmd_plan,
    "generate": cmd_generate,
    "invert": cmd_invert,
    "evaluate": cmd_evaluate,
    "train": cmd_train,
    "demo": cmd_demo,
    "config": cmd_config,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = load_config(args.config) if args.config else PipelineConfig()
        if args.seed is not None:
            cfg = dataclasses.replace(cfg, seed=args.seed)
        return COMMANDS[args.command](args, cfg)
    except BAD_INPUT_ERRORS as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except ConfigError as e:
        print(f"config error: {e}", file=sys.stderr)
        return 1
    except Exception as e:  # noqa: BLE001 - uniform CLI error surface
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
