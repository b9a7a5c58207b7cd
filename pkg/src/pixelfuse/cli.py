"""Command-line entry point. Every subcommand reads the run config, writes its
outputs plus a ``config.toml`` snapshot into ``--out``, and reports failures
as one ``pixelfuse-error: {json}`` line on stderr with a nonzero exit."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .autodiff import set_deterministic
from .checkpoint import CheckpointError, load_checkpoint
from .data import ParseError, VocabError, export_dataset, parse_caption, rasterize, sample_batch
from .evaluation import attention_maps, write_attention_maps
from .experiments import (ablation_report, caption_ce, generation_eval, ratio_sweep, reconstruction_eval,
                          scene_pools, vqa_accuracy, vqa_items)
from .model import ModelConfig
from .patches import to_uint8, to_unit_range
from .plotting import plot_metrics
from .pnm import read_pnm, write_ppm
from .rng import SeededStream
from .sampling import answer, edit, generate_batch
from .training import (GRADCHECK_CONFIG, gradcheck_batch, gradcheck_model, model_from_checkpoint,
                       model_grad_check, run_stage)

EXIT_FAILURE = 1
EXIT_USAGE = 2


class CliError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        _report("UsageError", message)
        sys.exit(EXIT_USAGE)


def _report(kind: str, message: str) -> None:
    line = json.dumps({"error": kind, "message": " ".join(str(message).split())}, sort_keys=True)
    print(f"pixelfuse-error: {line}", file=sys.stderr)


# -- helpers ---------------------------------------------------------------------

def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _snapshot(out: Path, config: cfgmod.RunConfig, **extra) -> None:
    text = cfgmod.dump(config)
    if extra:
        text += "\n# invocation\n" + "".join(f"# {k} = {v}\n" for k, v in sorted(extra.items()))
    (out / "config.toml").write_text(text)


def _load_ckpt(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}")
    return load_checkpoint(path)


def _model(path):
    return model_from_checkpoint(_load_ckpt(path)).eval()


def _read_image(path, config) -> np.ndarray:
    if not Path(path).is_file():
        raise CliError(f"image not found: {path}")
    img = to_unit_range(read_pnm(path))
    if img.ndim == 2:
        img = np.repeat(img[..., None], 3, axis=-1)
    if tuple(img.shape) != config.grid.image_shape:
        raise CliError(f"image shape {tuple(img.shape)} does not match model input {config.grid.image_shape}")
    return img


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


# -- subcommands -------------------------------------------------------------------

def cmd_gen_data(args, config):
    out = _out(args)
    data = config.data_config()
    scenes, _ = scene_pools(data)
    stream = SeededStream(data.seed)
    hw = (config.model.image_size, config.model.image_size)
    records = sample_batch(config.mix, args.stage, args.n, stream, scenes, max_objects=data.max_objects,
                           qa_fraction=data.qa_fraction, edit_fraction=data.edit_fraction, hw=hw)
    manifest = export_dataset(records, out)
    _snapshot(out, config, n=args.n, stage=args.stage)
    print(manifest)


def _train(args, config, stage):
    out = _out(args)
    init = _load_ckpt(args.ckpt) if args.ckpt else None
    if init is not None:
        # the architecture comes from the checkpoint; an explicit different [model] is an error
        if config.model not in (ModelConfig(), init.model_config):
            raise CliError("[model] settings do not match the checkpoint's architecture")
        config = replace(config, model=init.model_config)
    data = config.data_config()
    scenes, _ = scene_pools(data)
    res = run_stage(config.train_config(stage), config.model, init=init, scenes=scenes, data=data,
                    out_dir=out, progress=args.verbose)
    _snapshot(out, config, init=args.ckpt or "")
    last = res.metrics[-1] if res.metrics else None
    print(json.dumps({"checkpoint": str(out / "final.pxfu"), "step": res.checkpoint.step,
                      "ce_loss": last.ce_loss if last else None,
                      "flow_mse_loss": last.flow_mse_loss if last else None}, sort_keys=True))


def cmd_pretrain(args, config):
    _train(args, config, "pretrain")


def cmd_sft(args, config):
    if not args.ckpt:
        raise CliError("sft needs --ckpt (a pretrained checkpoint)")
    _train(args, config, "sft")


def cmd_recon_finetune(args, config):
    if not args.ckpt:
        raise CliError("recon-finetune needs --ckpt")
    _train(args, config, "recon_finetune")


def cmd_sample(args, config):
    out = _out(args)
    model = _model(args.ckpt)
    run = config.sample_config()
    images = generate_batch(model, args.prompt, run, [run.seed + i for i in range(len(args.prompt))])
    for i, (prompt, img) in enumerate(zip(args.prompt, images)):
        write_ppm(out / f"sample_{i:03d}.ppm", to_uint8(img))
        _write_json(out / f"sample_{i:03d}.json", {"prompt": prompt, "checkpoint": str(args.ckpt),
                                                    "seed": run.seed + i, "sample": asdict(run)})
    _snapshot(out, config, ckpt=args.ckpt)
    print(out / "sample_000.ppm")


def cmd_edit(args, config):
    out = _out(args)
    model = _model(args.ckpt)
    run = config.sample_config()
    img = edit(model, _read_image(args.image, model.config), args.instruction, run)
    write_ppm(out / "edit.ppm", to_uint8(img))
    _write_json(out / "edit.json", {"image": str(args.image), "instruction": args.instruction,
                                    "checkpoint": str(args.ckpt), "sample": asdict(run)})
    _snapshot(out, config, ckpt=args.ckpt)
    print(out / "edit.ppm")


def cmd_answer(args, config):
    out = _out(args)
    model = _model(args.ckpt)
    text = answer(model, _read_image(args.image, model.config), args.question)
    _write_json(out / "answer.json", {"image": str(args.image), "question": args.question, "answer": text})
    _snapshot(out, config, ckpt=args.ckpt)
    print(text)


EVAL_KINDS = ("ce", "generation", "vqa", "recon")


def cmd_eval(args, config):
    out = _out(args)
    model = _model(args.ckpt)
    data = config.data_config()
    train_scenes, eval_scenes = scene_pools(data)
    scenes = train_scenes if args.split == "train" and train_scenes else eval_scenes
    run = config.sample_config()
    kinds = args.metrics.split(",")
    unknown = set(kinds) - set(EVAL_KINDS)
    if unknown:
        raise CliError(f"unknown eval metrics {sorted(unknown)}; choose from {list(EVAL_KINDS)}")
    report = {"split": args.split, "n_scenes": len(scenes)}
    if "ce" in kinds:
        report["caption_ce"] = caption_ce(model, scenes)
    if "generation" in kinds:
        gen = generation_eval(model, scenes, run)
        report["compositional_accuracy"] = gen["compositional_accuracy"]
        report["psnr"] = gen["psnr"]
    if "vqa" in kinds:
        report["vqa_accuracy"] = vqa_accuracy(model, vqa_items(scenes))
    if "recon" in kinds:
        rec = reconstruction_eval(model, scenes, run)
        report.update(recon_psnr=rec["mean_psnr"], recon_ssim=rec["mean_ssim"])
    _write_json(out / "eval.json", report)
    _snapshot(out, config, ckpt=args.ckpt, split=args.split, metrics=args.metrics)
    print(json.dumps({k: v for k, v in report.items() if not isinstance(v, list)}, sort_keys=True))


def cmd_ablate_masking(args, config):
    out = _out(args)
    ab = config.ablate
    data = replace(config.data_config(), qa_fraction=ab.qa_fraction)
    train = config.train_config("pretrain")
    res = ablation_report(train, config.model, data, ab.eval_scenes, config.sample_config(), out,
                          shared_steps=round(ab.shared_fraction * train.steps))
    _snapshot(out, config)
    print(res.table(), end="")


def cmd_ratio_sweep(args, config):
    out = _out(args)
    ratios = tuple((args.ratios or config.sweep.ratios).split(","))
    res = ratio_sweep(config.train_config("pretrain"), ratios, config.model, config.data_config(), out,
                      config.sweep.smooth_fraction)
    paths = {tag: out / tag / "metrics.csv" for tag in ratios}
    (out / "sweep.svg").write_text(plot_metrics(paths, ("flow_mse_loss", "und_ce_loss")))
    _snapshot(out, config, ratios=",".join(ratios))
    print(res.csv(), end="")
    print(f"mse_rho={res.mse_rho:.3f} ce_rho={res.ce_rho:.3f} strictly_ordered={res.strictly_ordered()}")


def cmd_attn_dump(args, config):
    out = _out(args)
    model = _model(args.ckpt)
    hw = model.config.image_size
    if args.image:
        img = _read_image(args.image, model.config)
    else:
        try:
            img = rasterize(parse_caption(args.prompt), hw, hw)
        except ParseError as e:
            raise CliError(f"{e}; pass --image when the prompt is not a full scene caption") from None
    maps = attention_maps(model, img, args.prompt, args.keyword)
    paths = write_attention_maps(maps, out, hw, hw)
    write_ppm(out / "image.ppm", to_uint8(img))
    _write_json(out / "attn.json", {"prompt": args.prompt, "keyword": args.keyword,
                                    "maps": [{"layer": m.layer, "weights": m.weights.tolist()} for m in maps]})
    _snapshot(out, config, ckpt=args.ckpt)
    for p in paths:
        print(p)


def cmd_gradcheck(args, config):
    model = gradcheck_model(GRADCHECK_CONFIG, seed=config.seed)
    report = model_grad_check(model, gradcheck_batch(GRADCHECK_CONFIG, config.seed), tolerance=args.tolerance)
    print(report.format())
    if args.out:
        out = _out(args)
        (out / "gradcheck.txt").write_text(report.format() + "\n")
        _snapshot(out, config)
    return 0 if report.passed else EXIT_FAILURE


def cmd_plot(args, config):
    out = _out(args)
    paths = {}
    for item in args.csv:
        label, sep, path = item.partition("=")
        label, path = (label, path) if sep else (Path(item).parent.name or item, item)
        if not Path(path).is_file():
            raise CliError(f"metrics file not found: {path}")
        paths[label] = path
    (out / "plot.svg").write_text(plot_metrics(paths, args.columns.split(",")))
    _snapshot(out, config)
    print(out / "plot.svg")


# -- parser ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", help="config file ([section] / key = value)")
    common.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config key (repeatable)")
    common.add_argument("--seed", type=int, default=0, help="single source of all randomness")
    common.add_argument("--verbose", action="store_true", help="log training progress")

    def out_arg(p, required=True):
        p.add_argument("--out", required=required, help="output directory")

    parser = _Parser(prog="pixelfuse", description="Desk-scale encoder-free unified multimodal model.",
                     epilog=cfgmod.help_text(), formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def add(name, fn, help_):
        p = sub.add_parser(name, parents=[common], help=help_, epilog=cfgmod.help_text(),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.set_defaults(fn=fn)
        return p

    p = add("gen-data", cmd_gen_data, "export a sampled dataset (manifest.jsonl + PPMs)")
    out_arg(p)
    p.add_argument("--n", type=int, default=256, help="number of records")
    p.add_argument("--stage", choices=("pretrain", "sft", "recon_finetune"), default="pretrain")

    for name, fn, ckpt_help in (("pretrain", cmd_pretrain, "resume from this pretrain checkpoint"),
                                ("sft", cmd_sft, "pretrained checkpoint (required)"),
                                ("recon-finetune", cmd_recon_finetune, "checkpoint to finetune (required)")):
        p = add(name, fn, f"{name} stage")
        out_arg(p)
        p.add_argument("--ckpt", help=ckpt_help)

    p = add("sample", cmd_sample, "text-to-image generation")
    out_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", action="append", required=True, help="caption (repeatable)")

    p = add("edit", cmd_edit, "instruction-based image editing")
    out_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="source PPM")
    p.add_argument("--instruction", required=True)

    p = add("answer", cmd_answer, "answer a question about an image")
    out_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True, help="PPM")
    p.add_argument("--question", required=True)

    p = add("eval", cmd_eval, "caption CE, compositional accuracy, VQA and reconstruction metrics")
    out_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--split", choices=("eval", "train"), default="eval",
                   help="eval: held-out or fresh scenes; train: the training corpus")
    p.add_argument("--metrics", default="ce,generation,vqa", help=f"comma list from {','.join(EVAL_KINDS)}")

    p = add("ablate-masking", cmd_ablate_masking, "masked vs unmasked branches from a shared checkpoint")
    out_arg(p)

    p = add("ratio-sweep", cmd_ratio_sweep, "equal-budget pretraining over xgyu mixtures")
    out_arg(p)
    p.add_argument("--ratios", help="comma list such as 8g2u,7g3u,5g5u,3g7u (default: sweep.ratios)")

    p = add("attn-dump", cmd_attn_dump, "keyword-to-image attention maps per layer (PGM)")
    out_arg(p)
    p.add_argument("--ckpt", required=True)
    p.add_argument("--prompt", required=True)
    p.add_argument("--keyword", required=True)
    p.add_argument("--image", help="PPM; default renders the prompt's scene")

    p = add("gradcheck", cmd_gradcheck, "finite-difference check of the joint loss gradient")
    out_arg(p, required=False)
    p.add_argument("--tolerance", type=float, default=1e-4)

    p = add("plot", cmd_plot, "SVG line plot of metrics CSV columns")
    out_arg(p)
    p.add_argument("--csv", action="append", required=True, metavar="[LABEL=]PATH")
    p.add_argument("--columns", default="flow_mse_loss,ce_loss")
    return parser


HANDLED = (CliError, cfgmod.ConfigError, CheckpointError, ParseError, VocabError, OSError, ValueError, KeyError)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    set_deterministic()
    if args.verbose:
        logging.basicConfig(level=logging.INFO, format="%(message)s")
    try:
        config = cfgmod.load(args.config, args.set, args.seed)
        code = args.fn(args, config)
    except HANDLED as e:
        kind = type(e).__name__
        _report(kind, e.args[0] if isinstance(e, KeyError) and e.args else e)
        return EXIT_FAILURE
    return code or 0


if __name__ == "__main__":
    sys.exit(main())
