"""Command-line entry point: ``jowl <subcommand> [flags]``.

Exit codes: 0 success, 1 validation error (bad flags, config, checkpoint or
paths), 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import attack as A
from . import explain as X
from . import gradcheck as G
from . import harness as H
from . import models as M
from . import pipeline as J
from . import storage as S
from . import training as T
from .config import ConfigError, RunConfig
from .synthgen import CONCEPTS, make_dataset

log = logging.getLogger("jowl")

GRADCHECK_LIMIT = 1e-4
STAGE_ORDER = ("detector", "mllm", "align")


class UsageError(ValueError):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: {message}")


# helpers ---------------------------------------------------------------------------

def _config(args):
    cfg = RunConfig.load(args.config)
    if args.seed is not None:
        cfg = cfg.with_updates(seeds={"dataset": args.seed})
    return cfg


def _workdir(cfg):
    return Path(cfg["paths"]["workdir"])


def _out(args, cfg, default):
    return Path(args.out) if args.out else _workdir(cfg) / default


def _dataset(cfg):
    return make_dataset(cfg.dataset)


def _load(args, cfg, required=(), default=None):
    path = Path(args.checkpoint) if args.checkpoint else default
    if path is None:
        raise UsageError("--checkpoint is required")
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    params, manifest = S.load_checkpoint(path)
    if manifest.get("dataset_hash") not in (None, S.dataset_hash(cfg.dataset)):
        raise ConfigError(f"{path} was trained on a different dataset config")
    missing = [s for s in required if s not in manifest.get("stages", [])]
    if missing:
        raise ConfigError(f"{path} has not completed stage(s) {missing}")
    if params.arch != cfg.arch:
        raise ConfigError(f"{path} architecture differs from the config")
    return params, list(manifest.get("stages", []))


def _emit(obj, path=None):
    text = json.dumps(obj, sort_keys=True, indent=2, allow_nan=False)
    print(text)
    if path is not None:
        S.write_json(path, obj)


def _words(text, what):
    words = text.split()
    if not words:
        raise UsageError(f"{what} is empty")
    M.tokenize(words)
    return words


def _image(args, cfg):
    """The image from --image (PPM) or test scene --scene (default 0)."""
    if args.image:
        img = S.read_ppm(args.image)
        if img.shape != (cfg.arch.image_size,) * 2 + (3,):
            raise UsageError(f"{args.image}: expected a {cfg.arch.image_size}x{cfg.arch.image_size} image")
        return img, None
    test = _dataset(cfg)["test"]
    k = args.scene or 0
    if not 0 <= k < len(test):
        raise UsageError(f"--scene must lie in [0, {len(test)})")
    return test[k].image, test[k]


def _sets(args, cfg):
    minus = args.minus or cfg["attack"]["minus"]
    plus = args.plus or cfg["attack"]["plus"]
    return A.ConceptSets(minus, plus)


def _delta(args, cfg, key="delta"):
    d = args.delta if args.delta is not None else cfg["attack"].get(key)
    if d is None and key != "delta":
        d = cfg["attack"]["delta"]
    return None if d is None else A.AttackConfig(d)


def _report_dict(report):
    d = report.to_dict()
    d.pop("wall_time", None)  # keeps reports byte-reproducible
    return d


# subcommands ---------------------------------------------------------------------------

def cmd_synth(args, cfg):
    out = _out(args, cfg, "data")
    ds = _dataset(cfg)
    meta = cfg.dataset.to_dict()
    for split, scenes in ds.items():
        S.write_dataset(out / f"{split}.jds", scenes, meta=dict(meta, split=split))
    _emit({"out": str(out), "sizes": {k: len(v) for k, v in ds.items()},
           "dataset_hash": S.dataset_hash(cfg.dataset)})


def _stage(args, cfg, stage, fn, needs=(), default_in=None):
    """Train one stage from --checkpoint (or a fresh init) and save checkpoint + report."""
    if args.checkpoint or needs:
        params, stages = _load(args, cfg, needs, default_in)
    else:
        init = cfg.init
        params = M.init_params(cfg.arch, seed=init["seed"], scheme=init["scheme"],
                               residual_scale=init["residual_scale"])
        stages = []
    ds = _dataset(cfg)
    params, report = fn(params, ds["train"], ds["val"], cfg.train(stage))
    log.info("stage %s finished in %.1f s", stage, report.wall_time)
    out = _out(args, cfg, f"{stage}.ckpt")
    S.save_checkpoint(params, out, S.dataset_hash(cfg.dataset), sorted(set(stages) | {stage}))
    S.write_json(out.with_suffix(".report.json"), _report_dict(report))
    _emit({"stage": stage, "checkpoint": str(out), "report": _report_dict(report)})


def cmd_pretrain_detector(args, cfg):
    _stage(args, cfg, "detector", T.pretrain_detector)


def cmd_pretrain_mllm(args, cfg):
    _stage(args, cfg, "mllm", T.pretrain_mllm)


def cmd_train_align(args, cfg):
    _stage(args, cfg, "align", T.train_alignment, ("detector", "mllm"), _workdir(cfg) / "mllm.ckpt")


def _trained(args, cfg):
    return _load(args, cfg, STAGE_ORDER, _workdir(cfg) / "align.ckpt")[0]


def cmd_run(args, cfg):
    params = _trained(args, cfg)
    image, _ = _image(args, cfg)
    prompt = _words(args.prompt or "contains circle ?", "--prompt")
    queries = args.concept or list(CONCEPTS)
    threshold = args.threshold if args.threshold is not None else cfg["detection"]["threshold"]
    if not 0.0 <= threshold <= 1.0:
        raise UsageError("--threshold must lie in [0, 1]")
    out = J.run_joint(params, image, prompt, queries, gen_steps=cfg["generation"]["steps"])
    kept = J.filter_boxes(out.owl, threshold)
    _emit({"prompt": prompt, "answer": out.tokens, "threshold": threshold, "detections": kept.to_dict()},
          Path(args.out) if args.out else None)


def cmd_explain(args, cfg):
    params = _trained(args, cfg)
    image, _ = _image(args, cfg)
    prompt = _words(args.prompt or "contains circle ?", "--prompt")
    concept = (args.concept or ["circle"])[0]
    final, r, det, s = X.saliency_map(params, image, prompt, concept)
    out = _out(args, cfg, "explain")
    S.write_ppm(out.with_suffix(".ppm"), X.render_overlay(image, final))
    sidecar = {"concept": concept, "prompt": prompt, "s": s, "token": M.VOCAB[s],
               "r": [float(v) for v in r], "boxes": det.to_dict()["boxes"]}
    S.write_json(out.with_suffix(".json"), sidecar)
    _emit({"overlay": str(out.with_suffix(".ppm")), "sidecar": str(out.with_suffix(".json")),
           "token": M.VOCAB[s]})


def cmd_attack(args, cfg):
    params = _trained(args, cfg)
    image, _ = _image(args, cfg)
    sets = _sets(args, cfg)
    probe = _words(args.prompt, "--prompt") if args.prompt else cfg["attack"]["probe"]
    t = J.embed(params, image)
    config = _delta(args, cfg) or A.AttackConfig.relative(t, cfg["attack"]["relative_delta"])
    report = A.attack_effect_report(params, image, sets, config, probe, embedding=t)
    _emit(report, _out(args, cfg, "attack.json"))


def cmd_hallucinate(args, cfg):
    params = _trained(args, cfg)
    report = H.hallucination_report(params, _dataset(cfg)["test"])
    _emit(report.to_dict(), _out(args, cfg, "hallucination.json"))


def cmd_bias(args, cfg):
    params = _trained(args, cfg)
    sets = _sets(args, cfg)
    probe = _words(args.prompt, "--prompt") if args.prompt else cfg["attack"]["probe"]
    report = H.bias_report(params, _dataset(cfg)["test"], sets, probe, _delta(args, cfg, "bias_delta"),
                           cfg["attack"]["relative_delta"])
    _emit(report.to_dict(), _out(args, cfg, "bias.json"))


def cmd_gradcheck(args, cfg):
    seed = 0 if args.seed is None else args.seed
    graphs = G.random_graphs_error(100, seed=seed)
    if args.checkpoint:
        params = _load(args, cfg)[0]
    else:
        init = cfg.init
        params = M.init_params(cfg.arch, seed=init["seed"], residual_scale=init["residual_scale"])
    scene = _dataset(cfg)["test"][0]
    model = G.model_errors(params, scene.image, _words(args.prompt or "contains circle ?", "--prompt"),
                           (args.concept or ["circle"])[0], seed=seed)
    worst = float(max(graphs, model["text"], model["boxes"]))
    _emit({"random_graphs": float(graphs), "model_text": float(model["text"]),
           "model_boxes": float(model["boxes"]), "max_relative_error": worst,
           "limit": GRADCHECK_LIMIT, "passed": worst < GRADCHECK_LIMIT},
          Path(args.out) if args.out else None)
    if worst >= GRADCHECK_LIMIT:
        raise RuntimeError(f"gradient check failed: max relative error {worst:.3g} >= {GRADCHECK_LIMIT}")


def cmd_all(args, cfg):
    """Every stage and report in sequence, into the work directory."""
    work = _workdir(cfg) if not args.out else Path(args.out)
    cfg = cfg.with_updates(paths={"workdir": str(work)})

    def sub(**kw):
        base = dict(config=None, checkpoint=None, out=None, seed=None, delta=args.delta, threshold=None,
                    concept=None, prompt=None, minus=None, plus=None, image=None, scene=None)
        base.update(kw)
        return argparse.Namespace(**base)

    cmd_synth(sub(), cfg)
    cmd_pretrain_detector(sub(), cfg)
    cmd_pretrain_mllm(sub(checkpoint=str(work / "detector.ckpt")), cfg)
    cmd_train_align(sub(checkpoint=str(work / "mllm.ckpt")), cfg)
    cmd_run(sub(out=str(work / "run.json")), cfg)
    cmd_explain(sub(), cfg)
    cmd_attack(sub(), cfg)
    cmd_hallucinate(sub(), cfg)
    cmd_bias(sub(), cfg)


COMMANDS = {
    "synth": (cmd_synth, "generate the dataset and write one dump per split"),
    "pretrain-detector": (cmd_pretrain_detector, "train the detection encoder and head"),
    "pretrain-mllm": (cmd_pretrain_mllm, "train the reference encoder and language model"),
    "train-align": (cmd_train_align, "fit the alignment MLP with everything else frozen"),
    "run": (cmd_run, "answer a prompt and list detections above the threshold"),
    "explain": (cmd_explain, "write a saliency overlay (PPM) and JSON sidecar"),
    "attack": (cmd_attack, "apply the semantic FGSM and report its effect"),
    "hallucinate": (cmd_hallucinate, "detection scores bucketed by ground truth and answer"),
    "bias": (cmd_bias, "probe-score deltas under the concept-swap attack"),
    "gradcheck": (cmd_gradcheck, "finite-difference check of the autodiff engine"),
    "all": (cmd_all, "run every stage and report in order"),
}


def build_parser():
    parser = _Parser(prog="jowl", description="Joint detector + language model toolkit.")
    parser.add_argument("-v", "--verbose", action="store_true")
    subs = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    subs.required = True
    for name, (_, help_text) in COMMANDS.items():
        p = subs.add_parser(name, help=help_text, description=help_text)
        p.add_argument("--config", help="run configuration JSON (default: bundled)")
        p.add_argument("--checkpoint", help="input checkpoint")
        p.add_argument("--out", help="output path")
        p.add_argument("--seed", type=int, help="dataset seed override (gradcheck: graph seed)")
        p.add_argument("--delta", type=float, help="absolute attack magnitude")
        p.add_argument("--threshold", type=float, help="detection display threshold")
        p.add_argument("--concept", action="append", choices=CONCEPTS, help="query concept (repeatable)")
        p.add_argument("--prompt", help='space-separated words, e.g. "contains circle ?"')
        p.add_argument("--minus", action="append", choices=CONCEPTS, help="concept to suppress")
        p.add_argument("--plus", action="append", choices=CONCEPTS, help="concept to amplify")
        p.add_argument("--image", help="input PPM image")
        p.add_argument("--scene", type=int, help="test-split scene index (default 0)")
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return 0 if exc.code in (0, None) else 1
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    fn = COMMANDS[args.command][0]
    try:
        if args.delta is not None and not (np.isfinite(args.delta) and args.delta > 0):
            raise UsageError("--delta must be positive")
        fn(args, _config(args))
    except (UsageError, ConfigError, S.FormatError, FileNotFoundError, M.VocabularyError) as exc:
        print(f"jowl {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - reported as a runtime failure
        log.debug("runtime failure", exc_info=True)
        print(f"jowl {args.command}: failed: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
