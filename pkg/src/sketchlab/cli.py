"""Command-line entry points: dataset synth/ingest, train, ablate, refine,
eval, and serve.

Every failure class maps to its own exit code so scripts can branch on them:

    2  usage errors (argparse)
    3  validation errors
    4  shape/dimension errors
    5  state errors (calls out of order)
    6  configuration errors
    7  dataset ingest errors
    8  prompt template errors
    9  training failures (non-finite loss)
    10 generator backend failures
    11 file I/O errors
    12 degenerate embedding combinations
    1  any other package error
"""

from __future__ import annotations

import argparse
import os
import sys
from pathlib import Path

from sketchlab import checkpoint as ckpt
from sketchlab import metrics as metrics_mod
from sketchlab.dataset import (
    descriptions,
    load_manifest,
    synth_fixture,
    write_fixture,
)
from sketchlab.encoder import EncoderConfig, EncoderModel
from sketchlab.errors import (
    BackendError,
    ConfigError,
    DegenerateCombinationError,
    DimensionError,
    IngestError,
    SketchLabError,
    StateError,
    TemplateError,
    TrainingError,
    ValidationError,
)
from sketchlab.images import load_image, write_pgm
from sketchlab.lora import AdaptedModel, LoraConfig, strip_adapters
from sketchlab.refine import RefinementConfig, ToyLatentBackend, run_session
from sketchlab.service import SketchService, build_server
from sketchlab.tokenizer import Tokenizer
from sketchlab.trainer import (
    TrainConfig,
    run_ablation,
    topk_accuracy,
    train,
    _encode_all,
)

BIND_ENV = "SKETCHLAB_BIND"

_EXIT_CODES = (
    (DegenerateCombinationError, 12),
    (IngestError, 7),
    (TemplateError, 8),
    (ConfigError, 6),
    (StateError, 5),
    (DimensionError, 4),
    (TrainingError, 9),
    (BackendError, 10),
    (ValidationError, 3),
    (SketchLabError, 1),
)


def _exit_code(exc: Exception) -> int:
    if isinstance(exc, OSError):
        return 11
    for exc_type, code in _EXIT_CODES:
        if isinstance(exc, exc_type):
            return code
    return 1


def _load_models(checkpoint_path: str | None, image_size: int):
    """Returns (tuned, base) encoder views for refinement and serving.

    With no checkpoint both views are the same default-seeded encoder. With
    one, the tuned view keeps its adapters attached and the base view is a
    second load with adapters stripped (the frozen pre-adaptation encoder).
    """
    if checkpoint_path is None:
        model = EncoderModel(EncoderConfig(image_size=image_size), seed=0)
        return model, model
    loaded = ckpt.load(checkpoint_path)
    tuned = loaded.model if isinstance(loaded, AdaptedModel) else loaded
    second = ckpt.load(checkpoint_path)
    base = second.model if isinstance(second, AdaptedModel) else second
    strip_adapters(base)
    return tuned, base


def _lora_from_args(args) -> LoraConfig:
    return LoraConfig(targets=args.lora_targets, rank=args.lora_rank,
                      alpha=args.lora_alpha)


def _train_config(args, lora: LoraConfig) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        seed=args.seed,
        split_ratio=args.split_ratio,
        lora=lora,
    )


def _cmd_dataset_synth(args) -> int:
    pairs = synth_fixture(args.clusters, args.per_cluster, args.seed,
                          image_size=args.size)
    manifest = write_fixture(pairs, args.out)
    print(f"wrote {len(pairs)} pairs ({args.clusters} clusters) to {manifest}")
    return 0


def _cmd_dataset_ingest(args) -> int:
    pairs = load_manifest(args.manifest, image_size=args.size)
    if args.format == "records":
        for p in pairs:
            print(f"id={p.id} size={p.image.width}x{p.image.height} "
                  f"description={p.description!r}")
    else:
        print(f"{len(pairs)} pairs ingested from {args.manifest}")
    return 0


def _cmd_train(args) -> int:
    pairs = load_manifest(args.manifest, image_size=args.size)
    tokenizer = Tokenizer.fit(descriptions(pairs))
    model = EncoderModel(EncoderConfig(image_size=args.size), tokenizer,
                         seed=args.model_seed)
    adapted, log = train(model, pairs, _train_config(args, _lora_from_args(args)))
    ckpt.save(adapted, args.out)
    if args.log:
        log.save(args.log)
    if args.format == "records":
        sys.stdout.write(log.to_records())
    else:
        final = log.final()
        print(f"trained {len(log.epochs)} epochs "
              f"({adapted.trainable_param_count()} adapter params)")
        print(f"final: loss={final.loss:.4f} acc@1={final.acc1:.3f} "
              f"acc@25={final.acc25:.3f}")
        print(f"checkpoint: {args.out}")
    return 0


def _parse_fixture_spec(spec: str) -> tuple[int, int]:
    fields = {}
    for part in spec.split(","):
        if "=" not in part:
            raise ValidationError(f"bad fixture spec component {part!r} "
                                  "(expected clusters=N,per=M)")
        key, value = part.split("=", 1)
        fields[key.strip()] = value.strip()
    try:
        return int(fields["clusters"]), int(fields["per"])
    except (KeyError, ValueError) as exc:
        raise ValidationError(f"bad fixture spec {spec!r}: {exc}") from exc


def _cmd_ablate(args) -> int:
    if args.manifest:
        pairs = load_manifest(args.manifest, image_size=args.size)
    else:
        clusters, per = _parse_fixture_spec(args.fixture)
        pairs = synth_fixture(clusters, per, args.seed, image_size=args.size)
    lora = LoraConfig(rank=args.lora_rank, alpha=args.lora_alpha)
    result = run_ablation(pairs, _train_config(args, lora),
                          encoder_config=EncoderConfig(image_size=args.size),
                          model_seed=args.model_seed)
    if args.out_dir:
        out = Path(args.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        for targets, log in result.logs.items():
            log.save(out / f"ablation_{targets}.log")
        (out / "ablation_table.txt").write_text(result.to_table() + "\n",
                                                encoding="utf-8")
    if args.format == "records":
        sys.stdout.write(result.to_records())
    else:
        print(result.to_table())
    return 0


def _cmd_refine(args) -> int:
    tuned, base = _load_models(args.checkpoint, args.size)
    model = tuned if args.model_kind == "model3" else base
    backend = ToyLatentBackend(image_size=model.config.image_size,
                               conditioning_dim=model.config.cond_dim,
                               seed=args.backend_seed)
    cfg = RefinementConfig(model_kind=args.model_kind, strength=args.strength,
                           guidance_scale=args.guidance,
                           iterations=args.iterations, seed=args.seed)
    input_image = load_image(args.input)
    reference = load_image(args.reference) if args.reference else None
    session = run_session(args.description, input_image, cfg, backend, model,
                          feedback_schedule=args.feedback or (),
                          reference=reference)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    for i, image in enumerate(session.images()):
        write_pgm(image, out / f"iteration_{i:03d}.pgm")
    reports = metrics_mod.report_session(session)
    for kind, report in reports.items():
        report.save(out / f"report_{kind}.txt")
    if args.format == "records":
        for report in reports.values():
            sys.stdout.write(report.to_text())
    else:
        print(f"{cfg.iterations} iterations ({args.model_kind}) -> {out}")
        prev = reports["previous_iteration"]
        for i in range(len(prev)):
            print(f"iter {i + 1}: ssim={prev.ssim[i]:.4f} "
                  f"psnr={prev.psnr[i]:.2f} clip={prev.clip_score[i]:.4f} "
                  f"lpips-like={prev.perceptual_distance[i]:.6f}")
    return 0


def _cmd_eval(args) -> int:
    pairs = load_manifest(args.manifest, image_size=args.size)
    if args.checkpoint:
        loaded = ckpt.load(args.checkpoint)
        model = loaded.model if isinstance(loaded, AdaptedModel) else loaded
    else:
        tokenizer = Tokenizer.fit(descriptions(pairs))
        model = EncoderModel(EncoderConfig(image_size=args.size), tokenizer,
                             seed=args.model_seed)
    tokens = [model.tokenizer.encode(p.description) for p in pairs]
    images = [p.image for p in pairs]
    t, m = _encode_all(model, tokens, images)
    ks = [int(k) for k in args.k.split(",")]
    for k in ks:
        acc = topk_accuracy(t, m, k)
        suffix = " (clamped)" if acc.clamped else ""
        if args.format == "records":
            print(f"k={acc.k} acc={acc.fraction!r}{suffix}")
        else:
            print(f"acc@{acc.k}: {acc.fraction:.4f} over {len(pairs)} pairs{suffix}")
    return 0


def _default_bind() -> tuple[str, int]:
    raw = os.environ.get(BIND_ENV, "127.0.0.1:8765")
    host, _, port = raw.rpartition(":")
    if not host or not port.isdigit():
        raise ConfigError(f"{BIND_ENV} must look like host:port, got {raw!r}")
    return host, int(port)


def _cmd_serve(args) -> int:
    host = args.host if args.host is not None else _default_bind()[0]
    port = args.port if args.port is not None else _default_bind()[1]
    tuned, base = _load_models(args.checkpoint, args.size)
    backend = ToyLatentBackend(image_size=tuned.config.image_size,
                               conditioning_dim=tuned.config.cond_dim,
                               seed=args.backend_seed)
    service = SketchService(tuned, base, backend,
                            max_sessions=args.max_sessions)
    server = build_server(service, host, port, ui_dir=args.ui_dir,
                          verbose=args.verbose)
    actual_host, actual_port = server.server_address[:2]
    print(f"serving on http://{actual_host}:{actual_port}/ "
          f"(checkpoint: {args.checkpoint or 'none, default weights'})")
    try:
        server.serve_forever()
    except KeyboardInterrupt:
        pass
    finally:
        server.server_close()
    return 0


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=16)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0, help="training seed")
    p.add_argument("--model-seed", type=int, default=0,
                   help="encoder weight init seed")
    p.add_argument("--split-ratio", type=float, default=0.8)
    p.add_argument("--lora-rank", type=int, default=4)
    p.add_argument("--lora-alpha", type=float, default=8.0)
    p.add_argument("--size", type=int, default=64, help="image side in pixels")


def _add_format_flag(p: argparse.ArgumentParser) -> None:
    p.add_argument("--format", choices=("text", "records"), default="text")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sketchlab",
        description="Train, evaluate, and serve the sketch refinement pipeline.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    dataset = sub.add_parser("dataset", help="synthesize or ingest datasets")
    dsub = dataset.add_subparsers(dest="dataset_command", required=True)
    synth = dsub.add_parser("synth", help="write a clustered synthetic fixture")
    synth.add_argument("--out", required=True)
    synth.add_argument("--clusters", type=int, default=4)
    synth.add_argument("--per-cluster", type=int, default=8)
    synth.add_argument("--seed", type=int, default=0)
    synth.add_argument("--size", type=int, default=64)
    synth.set_defaults(func=_cmd_dataset_synth)
    ingest = dsub.add_parser("ingest", help="validate a JSONL manifest")
    ingest.add_argument("--manifest", required=True)
    ingest.add_argument("--size", type=int, default=64)
    _add_format_flag(ingest)
    ingest.set_defaults(func=_cmd_dataset_ingest)

    train_p = sub.add_parser("train", help="LoRA fine-tune on a manifest")
    train_p.add_argument("--manifest", required=True)
    train_p.add_argument("--out", default="sketch.skch",
                         help="checkpoint output path")
    train_p.add_argument("--log", default=None, help="training log output path")
    train_p.add_argument("--lora-targets",
                         choices=("self_attention", "cross_attention", "both"),
                         default="both")
    _add_train_flags(train_p)
    _add_format_flag(train_p)
    train_p.set_defaults(func=_cmd_train)

    ablate = sub.add_parser("ablate",
                            help="compare self/cross/both adapter targets")
    src = ablate.add_mutually_exclusive_group(required=True)
    src.add_argument("--manifest")
    src.add_argument("--fixture", help="synthetic spec, e.g. clusters=4,per=8")
    ablate.add_argument("--out-dir", default=None,
                        help="write per-arm logs and the comparison table here")
    _add_train_flags(ablate)
    _add_format_flag(ablate)
    ablate.set_defaults(func=_cmd_ablate)

    refine = sub.add_parser("refine", help="run an iterative refinement session")
    refine.add_argument("--input", required=True, help="input sketch (PGM)")
    refine.add_argument("--description", required=True)
    refine.add_argument("--reference", default=None,
                        help="ground-truth image for extra metrics")
    kind = refine.add_mutually_exclusive_group()
    kind.add_argument("--model1", dest="model_kind", action="store_const",
                      const="model1", help="generator only, zero conditioning")
    kind.add_argument("--model2", dest="model_kind", action="store_const",
                      const="model2", help="frozen encoder conditioning")
    kind.add_argument("--model3", dest="model_kind", action="store_const",
                      const="model3", help="adapter-tuned encoder conditioning")
    refine.set_defaults(model_kind="model1")
    refine.add_argument("--iterations", type=int, default=5)
    refine.add_argument("--strength", type=float, default=0.3)
    refine.add_argument("--guidance", type=float, default=7.5)
    refine.add_argument("--seed", type=int, default=0)
    refine.add_argument("--backend-seed", type=int, default=0)
    refine.add_argument("--checkpoint", default=None)
    refine.add_argument("--size", type=int, default=64)
    refine.add_argument("--out-dir", default="refine_out")
    refine.add_argument("--feedback", action="append", default=None,
                        help="feedback for the next iteration; repeatable")
    _add_format_flag(refine)
    refine.set_defaults(func=_cmd_refine)

    eval_p = sub.add_parser("eval", help="top-k retrieval accuracy on a manifest")
    eval_p.add_argument("--manifest", required=True)
    eval_p.add_argument("--checkpoint", default=None)
    eval_p.add_argument("--model-seed", type=int, default=0)
    eval_p.add_argument("--size", type=int, default=64)
    eval_p.add_argument("--k", default="1,5,10,25",
                        help="comma-separated k values")
    _add_format_flag(eval_p)
    eval_p.set_defaults(func=_cmd_eval)

    serve = sub.add_parser("serve", help="run the HTTP session service")
    serve.add_argument("--host", default=None,
                       help=f"bind host (default from ${BIND_ENV} or 127.0.0.1)")
    serve.add_argument("--port", type=int, default=None,
                       help=f"bind port (default from ${BIND_ENV} or 8765)")
    serve.add_argument("--checkpoint", default=None)
    serve.add_argument("--size", type=int, default=64)
    serve.add_argument("--backend-seed", type=int, default=0)
    serve.add_argument("--max-sessions", type=int, default=64)
    serve.add_argument("--ui-dir", default=None,
                       help="serve this static directory at /")
    serve.add_argument("--verbose", action="store_true")
    serve.set_defaults(func=_cmd_serve)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (SketchLabError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return _exit_code(exc)


if __name__ == "__main__":
    sys.exit(main())
