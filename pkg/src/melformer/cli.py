"""Operator entry point.

Subcommands: pretrain, finetune, evaluate, extract, gradcheck, paramcount,
synthdata. Configuration precedence is command-line flag > config file
(JSON, sections "model" / "pretrain" / "finetune") > preset default, and
every field is validated before any compute. Exit codes: 0 ok, 2 config,
3 data, 4 numeric, 5 I/O.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import fields
from pathlib import Path

import numpy as np

from .data import (
    generate_synthetic_dataset,
    latest_checkpoint,
    load_checkpoint,
    load_examples,
    read_manifest,
    read_wav,
    restore_model,
    save_checkpoint,
)
from .dsp import logmel
from .errors import (
    ConfigError,
    DataError,
    MelformerError,
    NumericError,
    ShapeError,
    StorageError,
)
from .finetune import FinetuneConfig, make_head, run_finetuning, evaluate_model
from .gradcheck import run_gradcheck_suite
from .model import ConformerModel, ModelConfig, param_count
from .pretrain import Adam, PretrainConfig, run_pretraining

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
EXIT_IO = 5

CONFIG_SECTIONS = ("model", "pretrain", "finetune", "manifest", "out_dir")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    try:
        raw = json.loads(Path(path).read_text())
    except FileNotFoundError as exc:
        raise ConfigError(f"config file not found: {path}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
    unknown = set(raw) - set(CONFIG_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown config sections: {sorted(unknown)}")
    return raw


def _build_config(cls, *sources: dict):
    """Later sources win; unknown keys are rejected; validation is cls's."""
    merged = {}
    for src in sources:
        merged.update({k: v for k, v in src.items() if v is not None})
    valid = {f.name for f in fields(cls)}
    unknown = set(merged) - valid
    if unknown:
        raise ConfigError(f"unknown {cls.__name__} fields: {sorted(unknown)}")
    return cls(**merged)


def _model_config(args, file_config: dict) -> ModelConfig:
    base = dict(ModelConfig.preset(args.preset).to_dict()) if args.preset else {}
    return _build_config(ModelConfig, base, file_config.get("model", {}))


def _require(value, flag: str):
    if value is None:
        raise ConfigError(f"missing required option {flag}")
    return value


def _train_logmels(manifest, base_dir: Path, split: str) -> list[np.ndarray]:
    records = manifest.split(split)
    if not records:
        raise DataError(f"manifest has no '{split}' records")
    return [
        logmel(read_wav(base_dir / record.audio_path)).frames.astype(np.float32)
        for record in records
    ]


def cmd_pretrain(args) -> int:
    file_config = _load_config_file(args.config)
    model_config = _model_config(args, file_config)
    pcfg = _build_config(
        PretrainConfig, file_config.get("pretrain", {}), {"seed": args.seed}
    )
    manifest_path = Path(_require(args.manifest or file_config.get("manifest"), "--manifest"))
    out_dir = Path(_require(args.out_dir or file_config.get("out_dir"), "--out-dir"))
    manifest = read_manifest(manifest_path)
    clips = _train_logmels(manifest, manifest_path.parent, "train")

    model = ConformerModel(model_config, seed=pcfg.seed)
    optimizer = Adam(
        list(model.named_parameters()),
        beta1=pcfg.beta1,
        beta2=pcfg.beta2,
        weight_decay=pcfg.weight_decay,
    )
    start_step = 0
    resume_from = latest_checkpoint(out_dir)
    if resume_from is not None:
        ck = load_checkpoint(resume_from)
        if ck.model_config != model_config.to_dict():
            raise ConfigError(f"checkpoint at {resume_from} has a different architecture")
        if ck.seed != pcfg.seed:
            raise ConfigError(f"checkpoint seed {ck.seed} differs from --seed {pcfg.seed}")
        model.load_state_arrays(ck.arrays)
        if ck.optimizer_arrays is not None:
            optimizer.load_state_arrays(ck.optimizer_arrays, ck.optimizer_step)
        start_step = ck.step
        print(f"resuming from {resume_from} at step {start_step}")
    run_pretraining(
        model,
        clips,
        pcfg,
        out_dir,
        max_steps=args.max_steps,
        start_step=start_step,
        optimizer=optimizer,
        deterministic=args.deterministic,
        log=lambda rec: print(
            f"step {rec['step']} loss {rec['loss']:.4f} lr {rec['lr']:.2e}"
        ),
    )
    return EXIT_OK


def _load_labeled_splits(args, file_config):
    manifest_path = Path(_require(args.manifest or file_config.get("manifest"), "--manifest"))
    manifest = read_manifest(manifest_path)
    train = load_examples(manifest, manifest_path.parent, "train")
    eval_set = load_examples(manifest, manifest_path.parent, "eval")
    if not train:
        raise DataError("manifest has no train records")
    return manifest, train, eval_set


def cmd_finetune(args) -> int:
    file_config = _load_config_file(args.config)
    manifest, train, eval_set = _load_labeled_splits(args, file_config)
    out_dir = Path(_require(args.out_dir or file_config.get("out_dir"), "--out-dir"))
    fcfg = _build_config(
        FinetuneConfig,
        {"num_classes": len(manifest.vocabulary)},
        file_config.get("finetune", {}),
        {"seed": args.seed, "head_kind": args.head},
    )
    if args.init_checkpoint:
        ck = load_checkpoint(args.init_checkpoint)
        expect = _model_config(args, file_config) if (args.preset or "model" in file_config) else None
        model = restore_model(ck, expect_config=expect)
        print(f"initialized encoder from {args.init_checkpoint} (step {ck.step})")
    else:
        model = ConformerModel(_model_config(args, file_config), seed=fcfg.seed)
    head = make_head(
        fcfg.head_kind, model.config.latent_dim, fcfg.num_classes, seed=fcfg.seed
    )
    report = run_finetuning(
        model,
        head,
        train,
        fcfg,
        out_dir,
        eval_examples=eval_set or None,
        max_steps=args.max_steps,
        deterministic=args.deterministic,
        log=lambda rec: print(
            f"step {rec['step']} loss {rec['loss']:.4f} bce {rec['bce']:.4f} lr {rec['lr']:.2e}"
        ),
    )
    save_checkpoint(
        out_dir / "ckpt-final",
        model,
        step=fcfg.total_steps if args.max_steps is None else args.max_steps,
        seed=fcfg.seed,
        extra_arrays={f"head.{n}": p.values for n, p in head.named_parameters()},
        extra={
            "head_kind": fcfg.head_kind,
            "num_classes": fcfg.num_classes,
            "vocabulary": list(manifest.vocabulary),
        },
    )
    if report is not None:
        print(json.dumps(report.to_dict(), indent=2))
    return EXIT_OK


def _restore_finetuned(checkpoint_path):
    ck = load_checkpoint(checkpoint_path)
    if "head_kind" not in ck.extra:
        raise ConfigError(f"{checkpoint_path} has no fine-tuned head (use a finetune checkpoint)")
    model = restore_model(ck)
    head = make_head(
        ck.extra["head_kind"], model.config.latent_dim, ck.extra["num_classes"], seed=ck.seed
    )
    head_arrays = {
        n[len("head.") :]: a for n, a in ck.arrays.items() if n.startswith("head.")
    }
    head.load_state_arrays(head_arrays)
    return model, head, ck


def cmd_evaluate(args) -> int:
    file_config = _load_config_file(args.config)
    model, head, _ = _restore_finetuned(_require(args.init_checkpoint, "--init-checkpoint"))
    manifest_path = Path(_require(args.manifest or file_config.get("manifest"), "--manifest"))
    manifest = read_manifest(manifest_path)
    eval_set = load_examples(manifest, manifest_path.parent, args.split)
    if not eval_set:
        raise DataError(f"manifest has no '{args.split}' records")
    report = evaluate_model(model, head, eval_set)
    print(json.dumps(report.to_dict(), indent=2))
    if args.out_dir:
        out_dir = Path(args.out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        (out_dir / "report.json").write_text(json.dumps(report.to_dict(), indent=2) + "\n")
    return EXIT_OK


def cmd_extract(args) -> int:
    from . import tensor as T

    ck_path = _require(args.init_checkpoint, "--init-checkpoint")
    model = restore_model(load_checkpoint(ck_path))
    model.eval()
    out_dir = Path(_require(args.out_dir, "--out-dir"))
    out_dir.mkdir(parents=True, exist_ok=True)
    inputs = [Path(p) for p in args.inputs]
    if args.manifest:
        manifest_path = Path(args.manifest)
        manifest = read_manifest(manifest_path)
        inputs += [manifest_path.parent / r.audio_path for r in manifest.records]
    if not inputs:
        raise ConfigError("nothing to extract: pass wav paths or --manifest")
    for wav_path in inputs:
        frames = logmel(read_wav(wav_path)).frames.astype(np.float32)
        with T.no_grad():
            embedding = model.embed(frames).values
        target = out_dir / (wav_path.stem + ".npy")
        np.save(target, embedding)
        print(f"{wav_path.name} -> {target} {embedding.shape}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    results = run_gradcheck_suite(points_per_case=args.points, log=print)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise NumericError(f"{len(failed)} gradient checks above tolerance")
    return EXIT_OK


def cmd_paramcount(args) -> int:
    config = ModelConfig.preset(args.model_preset)
    print(param_count(config))
    return EXIT_OK


def cmd_synthdata(args) -> int:
    out_dir = Path(_require(args.out_dir, "--out-dir"))
    labels = (1, 1) if args.single_label else (1, 3)
    manifest = generate_synthetic_dataset(
        num_classes=args.num_classes,
        clips_per_class=args.clips_per_class,
        clip_seconds=args.clip_seconds,
        seed=args.seed,
        out_dir=out_dir,
        labels_per_clip=labels,
        eval_fraction=args.eval_fraction,
    )
    print(f"wrote {len(manifest.records)} clips to {out_dir} (manifest.tsv)")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    shared = argparse.ArgumentParser(add_help=False)
    shared.add_argument("--config", help="JSON config file")
    shared.add_argument("--seed", type=int, default=0)
    shared.add_argument(
        "--deterministic",
        action=argparse.BooleanOptionalAction,
        default=True,
        help="derive every random stream from --seed (and drop wall-clock from logs)",
    )
    shared.add_argument("--out-dir")
    shared.add_argument("--max-steps", type=int)
    shared.add_argument("--preset", choices=sorted(["cf_S", "cf_L"]))
    shared.add_argument("--init-checkpoint")
    shared.add_argument("--head", choices=["linear-softmax-pool", "mean-pool"])
    shared.add_argument("--manifest")

    parser = argparse.ArgumentParser(
        prog="melformer",
        description="Self-supervised conformer training on logmel audio, desk scale.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("pretrain", parents=[shared], help="masked contrastive pretraining")
    p.set_defaults(fn=cmd_pretrain)

    p = sub.add_parser("finetune", parents=[shared], help="supervised fine-tuning")
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("evaluate", parents=[shared], help="score a fine-tuned checkpoint")
    p.add_argument("--split", default="eval", choices=["train", "valid", "eval"])
    p.set_defaults(fn=cmd_evaluate)

    p = sub.add_parser("extract", parents=[shared], help="write per-clip context embeddings")
    p.add_argument("inputs", nargs="*", help="wav files")
    p.set_defaults(fn=cmd_extract)

    p = sub.add_parser("gradcheck", parents=[shared], help="finite-difference verification suite")
    p.add_argument("--points", type=int, default=10, help="random points per case")
    p.set_defaults(fn=cmd_gradcheck)

    p = sub.add_parser("paramcount", parents=[shared], help="trainable parameter count")
    p.add_argument("model_preset", choices=["cf_S", "cf_L"])
    p.set_defaults(fn=cmd_paramcount)

    p = sub.add_parser("synthdata", parents=[shared], help="generate a synthetic dataset")
    p.add_argument("--num-classes", type=int, default=8)
    p.add_argument("--clips-per-class", type=int, default=50)
    p.add_argument("--clip-seconds", type=float, default=2.0)
    p.add_argument("--single-label", action="store_true")
    p.add_argument("--eval-fraction", type=float, default=0.2)
    p.set_defaults(fn=cmd_synthdata)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.fn(args)
    except (ConfigError, ShapeError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (StorageError, OSError) as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except MelformerError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
