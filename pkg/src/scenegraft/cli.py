"""Command-line entry points: ``insert``, ``eval`` and ``ablate``.

Settings resolve with flag > ``--config`` file > built-in default. The config
file is a flat JSON object whose keys are the long flag names with dashes
replaced by underscores; unknown keys are errors.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import re
import sys
import threading
import typing
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from PIL import Image, ImageDraw

from .errors import (
    ConfigError,
    InsertionFailureError,
    InversionDivergenceError,
    MaskValidationError,
    ResolutionError,
    SceneGraftError,
    ShapeError,
    TransportError,
)
from .evalharness import (
    EvalClients,
    HashStubEmbedder,
    HTTPEmbedderClient,
    HTTPLPIPSClient,
    MeanAbsDiffLPIPS,
    MetricsReport,
    MetricsRow,
    evaluate_result,
    load_manifest,
)
from .imageio import image_hash, load_image, to_uint8
from .pipeline import (
    GenerationResult,
    Pipeline,
    PipelineConfig,
    PromptPair,
    RunLog,
    ablation_configs,
    make_backend,
    make_segmentation_client,
    write_run_dir,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_BAD_ARGS = 2
EXIT_INSERTION_FAILURE = 3
EXIT_INVERSION_DIVERGENCE = 4
EXIT_TRANSPORT = 5

EXIT_CODES_HELP = """exit codes:
  0  success
  1  runtime failure (eval: at least one manifest row failed)
  2  bad arguments or configuration
  3  insertion failure (no person detected after the retry)
  4  inversion divergence
  5  external client transport error
"""

RUN_KEYS = ("scene", "reference", "scene_prompt", "subject_prompt", "out", "run_id", "captioner_url")
EVAL_KEYS = ("manifest", "out", "jobs", "clip_url", "dino_url", "lpips_url", "crop")
ABLATE_KEYS = ("sweep_guidance", "sweep_window", "both_branches", "no_blending_variant",
               "no_personalization_variant", "with_baseline")
COMMAND_DEFAULTS = {"out": "out", "jobs": 1, "crop": "bbox", "both_branches": False,
                    "no_blending_variant": False, "no_personalization_variant": False,
                    "with_baseline": False}


def exit_code_for(exc: BaseException) -> int:
    if isinstance(exc, InsertionFailureError):
        return EXIT_INSERTION_FAILURE
    if isinstance(exc, InversionDivergenceError):
        return EXIT_INVERSION_DIVERGENCE
    if isinstance(exc, TransportError):
        return EXIT_TRANSPORT
    if isinstance(exc, (ConfigError, ResolutionError, MaskValidationError, ShapeError, FileNotFoundError)):
        return EXIT_BAD_ARGS
    return EXIT_FAILURE


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _window(text) -> tuple[int, int]:
    if isinstance(text, (list, tuple)):
        lo, hi = text
        return int(lo), int(hi)
    sep = "," if "," in text else "-"
    parts = text.split(sep)
    if len(parts) != 2:
        raise argparse.ArgumentTypeError(f"window must look like LO,HI or LO-HI, got {text!r}")
    return int(parts[0]), int(parts[1])


def _blocks(text) -> tuple[str, ...]:
    if isinstance(text, (list, tuple)):
        return tuple(text)
    return tuple(b.strip() for b in text.split(",") if b.strip())


def _float_list(text: str) -> list[float]:
    return [float(x) for x in text.split(",") if x.strip()]


def _window_list(text: str) -> list[tuple[int, int]]:
    return [_window(x) for x in text.split(",") if x.strip()]


def add_pipeline_flags(parser: argparse.ArgumentParser) -> None:
    """One flag per PipelineConfig field, named after the field."""
    group = parser.add_argument_group("pipeline settings")
    hints = typing.get_type_hints(PipelineConfig)
    for f in dataclasses.fields(PipelineConfig):
        hint = hints[f.name]
        default = f.default
        names = [_flag(f.name)]
        if f.name == "dump_attention":
            names.append("--dump-attention-csv")
        help_text = f"default: {default}"
        if hint is bool:
            group.add_argument(*names, dest=f.name, action=argparse.BooleanOptionalAction, help=help_text)
        elif f.name == "blending_window":
            group.add_argument(*names, dest=f.name, type=_window, metavar="LO,HI", help=help_text)
        elif f.name == "target_blocks":
            group.add_argument(*names, dest=f.name, type=_blocks, metavar="B1,B2",
                               help="default: " + ",".join(default))
        else:
            base = typing.get_args(hint)[0] if typing.get_origin(hint) is typing.Union else hint
            group.add_argument(*names, dest=f.name, type=base, help=help_text)


def _common(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", help="flat JSON file of settings (keys are flag names with underscores)")
    parser.add_argument("-v", "--verbose", action="store_true")
    add_pipeline_flags(parser)


def _run_inputs(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--scene", help="scene image (required)")
    parser.add_argument("--reference", help="subject reference image (required)")
    parser.add_argument("--scene-prompt", help="scene description containing 'a person' (required)")
    parser.add_argument("--subject-prompt", help="subject description, e.g. 'a man in a blue suit' (required)")
    parser.add_argument("--out", help="output root (default: out)")
    parser.add_argument("--run-id", help="override the content-derived run id")
    parser.add_argument("--captioner-url", help="captioning service hook; no client is bundled")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="scenegraft", description="Insert a reference subject into a scene image.",
        epilog=EXIT_CODES_HELP, formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)
    kw = dict(argument_default=argparse.SUPPRESS, epilog=EXIT_CODES_HELP, allow_abbrev=False,
              formatter_class=argparse.RawDescriptionHelpFormatter)

    ins = sub.add_parser("insert", help="run the pipeline once", **kw)
    _run_inputs(ins)
    _common(ins)

    ev = sub.add_parser("eval", help="run and score every row of a manifest", **kw)
    ev.add_argument("--manifest", help="CSV of scene_path, reference_path, scene_prompt, subject_prompt")
    ev.add_argument("--out", help="output root (default: out)")
    ev.add_argument("--jobs", type=int, help="rows processed concurrently (default: 1)")
    ev.add_argument("--clip-url", help="clip-like embedder service; stub when absent")
    ev.add_argument("--dino-url", help="dino-like embedder service; stub when absent")
    ev.add_argument("--lpips-url", help="LPIPS service; mean absolute difference when absent")
    ev.add_argument("--crop", choices=("bbox", "full"), help="subject crop for CLIP-I and DINO (default: bbox)")
    _common(ev)

    ab = sub.add_parser("ablate", help="run variants and emit a labeled contact sheet", **kw)
    _run_inputs(ab)
    ab.add_argument("--sweep-guidance", type=_float_list, metavar="W1,W2,...")
    ab.add_argument("--sweep-window", type=_window_list, metavar="LO-HI,LO-HI,...")
    ab.add_argument("--both-branches", action="store_true", help="inject reference attention on both branches")
    ab.add_argument("--no-blending-variant", action="store_true")
    ab.add_argument("--no-personalization-variant", action="store_true")
    ab.add_argument("--with-baseline", action="store_true", help="include the unmodified config as a panel")
    _common(ab)
    return parser


def _coerce_config_value(key: str, value: Any) -> Any:
    if key == "blending_window":
        return _window(value)
    if key == "target_blocks":
        return _blocks(value)
    if key == "sweep_guidance" and isinstance(value, str):
        return _float_list(value)
    if key == "sweep_window":
        return _window_list(value) if isinstance(value, str) else [_window(v) for v in value]
    return value


def resolve_settings(command: str, flags: dict[str, Any]) -> tuple[PipelineConfig, dict[str, Any]]:
    """Merge defaults, the config file and flags; returns the pipeline config and command options."""
    allowed = {"insert": RUN_KEYS, "eval": EVAL_KEYS, "ablate": RUN_KEYS + ABLATE_KEYS}[command]
    file_values: dict[str, Any] = {}
    if flags.get("config"):
        path = Path(flags["config"])
        try:
            file_values = json.loads(path.read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise ConfigError(f"cannot read config file {path}: {exc}") from exc
        if not isinstance(file_values, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        unknown = set(file_values) - set(PipelineConfig.field_names()) - set(allowed)
        if unknown:
            raise ConfigError(f"{path}: unknown config keys: {', '.join(sorted(unknown))}")
    merged = {k: v for k, v in COMMAND_DEFAULTS.items() if k in allowed}
    merged.update({k: _coerce_config_value(k, v) for k, v in file_values.items()})
    merged.update({k: v for k, v in flags.items() if k not in ("config", "verbose", "command")})
    pipe_values = {k: merged.pop(k) for k in list(merged) if k in PipelineConfig.field_names()}
    try:
        cfg = PipelineConfig.from_dict(pipe_values)
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return cfg, merged


def _require(opts: dict[str, Any], keys: Sequence[str]) -> None:
    missing = [_flag(k) for k in keys if not opts.get(k)]
    if missing:
        raise ConfigError(f"missing required setting(s): {', '.join(missing)}")


def make_run_id(scene: np.ndarray, reference: np.ndarray, prompts: PromptPair, cfg: PipelineConfig) -> str:
    payload = json.dumps([image_hash(scene), image_hash(reference), prompts.scene_prompt,
                          prompts.subject_prompt, cfg.to_dict()], sort_keys=True)
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


def assign_run_ids(base_ids: Sequence[str]) -> list[str]:
    """Suffix repeated ids so duplicate manifest rows get their own directories."""
    seen: dict[str, int] = {}
    out = []
    for rid in base_ids:
        seen[rid] = seen.get(rid, 0) + 1
        out.append(rid if seen[rid] == 1 else f"{rid}-{seen[rid]}")
    return out


def contact_sheet(images: Sequence[np.ndarray], labels: Sequence[str], pad: int = 4,
                  label_height: int = 14) -> np.ndarray:
    """Horizontal strip of images, each with its label above it; returns uint8 RGB."""
    if len(images) != len(labels) or not images:
        raise ValueError("contact sheet needs one label per image and at least one image")
    tiles = [to_uint8(im) for im in images]
    h = max(t.shape[0] for t in tiles)
    w = sum(t.shape[1] for t in tiles) + pad * (len(tiles) + 1)
    sheet = Image.new("RGB", (w, h + label_height + 2 * pad), "white")
    draw = ImageDraw.Draw(sheet)
    x = pad
    for tile, label in zip(tiles, labels):
        draw.text((x, pad // 2), label, fill="black")
        sheet.paste(Image.fromarray(tile), (x, label_height + pad))
        x += tile.shape[1] + pad
    return np.asarray(sheet)


class _Runner:
    """Shares backends (one per image size) and pipelines across rows."""

    def __init__(self, cfg: PipelineConfig):
        self.cfg = cfg
        self.seg = make_segmentation_client(cfg)
        self._pipes: dict[tuple, Pipeline] = {}
        self._lock = threading.Lock()

    def pipeline_for(self, image_shape) -> Pipeline:
        key = tuple(image_shape[:2])
        with self._lock:
            if key not in self._pipes:
                self._pipes[key] = Pipeline(make_backend(self.cfg, image_shape), self.seg)
            return self._pipes[key]


def _load_inputs(opts: dict[str, Any]) -> tuple[np.ndarray, np.ndarray, PromptPair]:
    if opts.get("captioner_url") and not opts.get("scene_prompt"):
        raise ConfigError("--captioner-url is a hook only; no captioning client is bundled, pass --scene-prompt")
    _require(opts, ("scene", "reference", "scene_prompt", "subject_prompt"))
    for key in ("scene", "reference"):
        if not Path(opts[key]).exists():
            raise ConfigError(f"{_flag(key)}: no such file {opts[key]}")
    prompts = PromptPair(opts["scene_prompt"], opts["subject_prompt"])
    return load_image(opts["scene"]), load_image(opts["reference"]), prompts


def _fail(exc: BaseException, log: RunLog, run_dir: Optional[Path]) -> int:
    log.emit("run_failed", level="error", error=type(exc).__name__, message=str(exc))
    if run_dir is not None:
        run_dir.mkdir(parents=True, exist_ok=True)
        log.write(run_dir / "log.jsonl")
    print(f"error: {exc}", file=sys.stderr)
    return exit_code_for(exc)


def cmd_insert(cfg: PipelineConfig, opts: dict[str, Any]) -> int:
    scene, ref, prompts = _load_inputs(opts)
    run_id = opts.get("run_id") or make_run_id(scene, ref, prompts, cfg)
    run_dir = Path(opts["out"]) / run_id
    log = RunLog()
    log.emit("run_started", run_id=run_id, command="insert")
    try:
        result = _Runner(cfg).pipeline_for(scene.shape).run(scene, ref, prompts, cfg, log=log)
    except SceneGraftError as exc:
        return _fail(exc, log, run_dir)
    write_run_dir(result, run_dir, log, {"run_id": run_id})
    print(run_dir)
    return EXIT_OK


def _eval_clients(opts: dict[str, Any], seg) -> EvalClients:
    clip = HTTPEmbedderClient(opts["clip_url"], "clip-like") if opts.get("clip_url") else HashStubEmbedder("clip-like")
    dino = HTTPEmbedderClient(opts["dino_url"], "dino-like") if opts.get("dino_url") else HashStubEmbedder("dino-like")
    lpips = HTTPLPIPSClient(opts["lpips_url"]) if opts.get("lpips_url") else MeanAbsDiffLPIPS()
    return EvalClients(clip, dino, lpips, seg, crop=opts["crop"])


def cmd_eval(cfg: PipelineConfig, opts: dict[str, Any]) -> int:
    _require(opts, ("manifest",))
    rows = load_manifest(opts["manifest"])
    jobs = int(opts["jobs"])
    if jobs < 1:
        raise ConfigError("--jobs must be >= 1")
    out_root = Path(opts["out"])
    runner = _Runner(cfg)
    clients = _eval_clients(opts, runner.seg)
    loaded = [(load_image(r.scene_path), load_image(r.reference_path), PromptPair(r.scene_prompt, r.subject_prompt))
              for r in rows]
    run_ids = assign_run_ids([make_run_id(s, rf, p, cfg) for s, rf, p in loaded])

    def work(i: int) -> MetricsRow:
        scene, ref, prompts = loaded[i]
        run_dir = out_root / run_ids[i]
        log = RunLog()
        log.emit("run_started", run_id=run_ids[i], command="eval", row=i + 1)
        try:
            result = runner.pipeline_for(scene.shape).run(scene, ref, prompts, cfg, log=log)
            write_run_dir(result, run_dir, log, {"run_id": run_ids[i]})
            return evaluate_result(run_ids[i], result, scene, ref, clients)
        except SceneGraftError as exc:
            _fail(exc, log, run_dir)
            return MetricsRow(sample_id=run_ids[i], error=f"{type(exc).__name__}: {exc}")

    with ThreadPoolExecutor(max_workers=jobs) as pool:
        metric_rows = list(pool.map(work, range(len(rows))))
    report = MetricsReport.from_rows(metric_rows)
    out_root.mkdir(parents=True, exist_ok=True)
    (out_root / "report.json").write_text(report.to_json())
    table = report.to_table()
    (out_root / "report.txt").write_text(table)
    print(table, end="")
    failed = [r.sample_id for r in metric_rows if r.error]
    if failed:
        print(f"{len(failed)} row(s) failed: {', '.join(failed)}", file=sys.stderr)
        return EXIT_FAILURE
    return EXIT_OK


def _slug(label: str) -> str:
    return re.sub(r"[^A-Za-z0-9.-]+", "_", label).strip("_")


def cmd_ablate(cfg: PipelineConfig, opts: dict[str, Any]) -> int:
    scene, ref, prompts = _load_inputs(opts)
    variants: list[tuple[str, PipelineConfig]] = []
    if opts.get("with_baseline"):
        variants.append(("default", cfg))
    if opts.get("sweep_guidance"):
        variants += ablation_configs("guidance_sweep", cfg, opts["sweep_guidance"])
    if opts.get("sweep_window"):
        variants += ablation_configs("window_sweep", cfg, opts["sweep_window"])
    if opts.get("both_branches"):
        variants += ablation_configs("both_branches", cfg)
    if opts.get("no_blending_variant"):
        variants += ablation_configs("no_blending", cfg)
    if opts.get("no_personalization_variant"):
        variants += ablation_configs("no_personalization", cfg)
    if not variants:
        raise ConfigError("select at least one variant (--sweep-guidance, --sweep-window, --both-branches, ...)")
    run_id = opts.get("run_id") or make_run_id(scene, ref, prompts, cfg)
    root = Path(opts["out"]) / run_id
    pipe = _Runner(cfg).pipeline_for(scene.shape)
    results: list[GenerationResult] = []
    for label, variant_cfg in variants:
        log = RunLog()
        log.emit("run_started", run_id=run_id, command="ablate", variant=label)
        run_dir = root / _slug(label)
        try:
            result = pipe.run(scene, ref, prompts, variant_cfg, log=log)
        except SceneGraftError as exc:
            return _fail(exc, log, run_dir)
        result.label = label
        write_run_dir(result, run_dir, log, {"run_id": run_id, "variant": label})
        results.append(result)
    sheet = contact_sheet([r.output_image for r in results], [r.label for r in results])
    Image.fromarray(sheet).save(root / "contact_sheet.png")
    print(root)
    return EXIT_OK


COMMANDS = {"insert": cmd_insert, "eval": cmd_eval, "ablate": cmd_ablate}


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    flags = vars(args)
    logging.basicConfig(level=logging.DEBUG if flags.get("verbose") else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, opts = resolve_settings(args.command, flags)
        return COMMANDS[args.command](cfg, opts)
    except SceneGraftError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exit_code_for(exc)


if __name__ == "__main__":
    sys.exit(main())
