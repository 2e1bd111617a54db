"""``dive`` command-line entry point.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from . import config as C
from .data import (EmptyCorpusError, ManifestError, Modality, corpus_stats, ingest_manifest,
                   ingest_market_layout, ingest_sysu_layout, select_identities, write_manifest)
from .diffusion import CheckpointError, load_checkpoint, save_checkpoint
from .expansion import ExpansionError, ExpansionPlan, expand
from .prompts import PromptSpec, RegistryError, UnregisteredTokenError
from .sampling import sample
from .toy import reserved_people, save_image
from .training import NonFiniteLossError

__all__ = ["main", "build_parser", "EXIT_OK", "EXIT_USAGE", "EXIT_DATA", "EXIT_NUMERICAL"]

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERICAL = 0, 1, 2, 3
log = logging.getLogger("dive")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _key_table() -> str:
    width = max(len(k) for k in C.KEY_DOCS)
    lines = ["config keys (file `key = value`, env DIVE_<KEY>, flag --key-name):"]
    lines += [f"  {k:<{width}}  {doc} [default: {C._render(C.default(k))}]"
              for k, doc in C.KEY_DOCS.items()]
    lines.append("")
    lines.append("precedence: config file < environment < flags")
    lines.append("toy-demo profile (below the config file): "
                 + ", ".join(f"{k}={C._render(v)}" for k, v in C.TOY_PROFILE.items()))
    lines.append("exit codes: 0 ok, 1 usage, 2 data error, 3 numerical failure")
    return "\n".join(lines)


def _config_parent() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("configuration")
    g.add_argument("--config", type=Path, help="flat key = value config file")
    for key in C.KEY_DOCS:
        g.add_argument(f"--{key.replace('_', '-')}", dest=f"cfg_{key}", metavar="V",
                       help=argparse.SUPPRESS)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dive", formatter_class=argparse.RawDescriptionHelpFormatter,
                     description="Expand a visible-infrared re-identification corpus with "
                                 "synthetic infrared images.",
                     epilog=_key_table())
    parser.add_argument("-v", "--verbose", action="count", default=0)
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    cfg = _config_parent()

    p = sub.add_parser("ingest", help="convert a dataset layout to a manifest", parents=[cfg])
    p.add_argument("--layout", choices=("manifest", "market", "sysu"), required=True)
    p.add_argument("--root", type=Path, required=True, help="dataset directory or manifest")
    p.add_argument("--dataset-id")
    p.add_argument("--out", type=Path, required=True, help="output directory")

    p = sub.add_parser("stats", help="print corpus statistics", parents=[cfg])
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--out", type=Path, help="directory for the config snapshot")

    p = sub.add_parser("train", help="fine-tune identity tokens and adapters", parents=[cfg])
    p.add_argument("--vi", type=Path, required=True, help="VI manifest")
    p.add_argument("--ext", type=Path, required=True, help="external visible manifest")
    p.add_argument("--base", type=Path, help="base checkpoint (default: cached toy base)")
    p.add_argument("--resume", type=Path, help="checkpoint to resume from")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("sample", help="generate images for one prompt", parents=[cfg])
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--identity", type=int, required=True)
    p.add_argument("--namespace", required=True, help="dataset id of the identity")
    p.add_argument("--modality", choices=[m.value for m in Modality], default="infrared")
    p.add_argument("--camera", type=int, help="camera index (omit for coarse tokens)")
    p.add_argument("--view-dataset", help="dataset id of the view token")
    p.add_argument("--n", type=int, default=4)
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("expand", help="generate the synthetic infrared corpus", parents=[cfg])
    p.add_argument("--checkpoint", type=Path, required=True)
    p.add_argument("--vi", type=Path, required=True, help="VI manifest (infrared views)")
    p.add_argument("--ext", type=Path, required=True, help="external visible manifest")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("evaluate", help="retrieval metrics, distances and FID", parents=[cfg])
    p.add_argument("--query", type=Path, required=True, help="query manifest")
    p.add_argument("--gallery", type=Path, required=True, help="gallery manifest")
    p.add_argument("--extractor", choices=("pixel", "toy"), default="pixel")
    p.add_argument("--fid-real", type=Path, help="manifest of real images for FID")
    p.add_argument("--out", type=Path, required=True)

    p = sub.add_parser("toy-demo", help="run the whole pipeline on the toy corpus",
                       parents=[cfg])
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--base", type=Path, help="base checkpoint path (created if missing)")
    return parser


def _effective(args) -> dict:
    file_values = C.read_config_file(args.config) if getattr(args, "config", None) else {}
    flags = {k: getattr(args, f"cfg_{k}", None) for k in C.KEY_DOCS}
    profile = C.TOY_PROFILE if args.command == "toy-demo" else None
    return C.layered(file_values, C.env_overrides(), flags, profile)


def _inputs(args) -> dict:
    skip = {"command", "verbose", "config"}
    return {k: v for k, v in vars(args).items()
            if k not in skip and not k.startswith("cfg_") and v is not None}


# -- subcommands ----------------------------------------------------------------

def cmd_ingest(args, cfg):
    if args.layout == "manifest":
        corpus = ingest_manifest(args.root)
    elif args.layout == "market":
        corpus = ingest_market_layout(args.root, args.dataset_id or "market1501")
    else:
        corpus = ingest_sysu_layout(args.root, args.dataset_id or "sysu-mm01")
    path = write_manifest(corpus, args.out / "manifest.tsv")
    print(f"wrote {len(corpus)} records to {path}")


def cmd_stats(args, cfg):
    print(corpus_stats(ingest_manifest(args.manifest)).format_table())


def _manifest_root(path: Path) -> Path:
    return path.resolve().parent


def cmd_train(args, cfg):
    from .pipeline import base_from_checkpoint, load_or_pretrain_base
    from .training import Trainer, TrainState, build_training_set, prepare_finetune, write_loss_curve

    vi, ext = ingest_manifest(args.vi), ingest_manifest(args.ext)
    if _manifest_root(args.vi) != _manifest_root(args.ext):
        raise ValueError("VI and external manifests must live in the same directory")
    tcfg = C.train_config(cfg)
    if args.base is not None:
        base = base_from_checkpoint(load_checkpoint(args.base))
    else:
        # the toy base, with the toy corpus persons held out
        base = load_or_pretrain_base(C.pretrain_config(cfg),
                                     exclude=reserved_people(0, cfg["seed"]))
    model, adapters = prepare_finetune(base, [vi, ext], tcfg)
    examples = build_training_set(vi, ext, base.registry, tcfg.view_granularity)
    trainer = Trainer(tcfg, examples, model, adapters, base.registry, base.encoder, base.sched,
                      image_root=_manifest_root(args.vi))
    if args.resume is not None:
        ck = load_checkpoint(args.resume)
        adapters.load_state_dict(ck.adapters.state_dict())
        with torch.no_grad():
            base.registry.table.weight.copy_(ck.registry.table.weight)
        extra = ck.extra
        trainer.load_state(TrainState(extra["step"], [tuple(x) for x in extra["loss_curve"]],
                                      extra["optimizer"]))
    ckdir = args.out / "checkpoints"
    for state in trainer.run():
        save_checkpoint(ckdir / f"step-{state.step:06d}.pt", model, base.registry, base.encoder,
                        base.sched, adapters,
                        extra={"train_config": asdict(tcfg), "step": state.step,
                               "loss_curve": state.loss_curve, "optimizer": state.optimizer})
        log.info("checkpoint at step %d", state.step)
    save_checkpoint(args.out / "checkpoint.pt", model, base.registry, base.encoder, base.sched,
                    adapters, extra={"train_config": asdict(tcfg), "step": trainer.step})
    write_loss_curve(trainer.loss_curve, args.out / "loss_curve.tsv")
    last = trainer.loss_curve[-1][1] if trainer.loss_curve else float("nan")
    print(f"trained {trainer.step} steps, last loss {last:.5f}")


def cmd_sample(args, cfg):
    from .sampling import SamplerConfig

    ck = load_checkpoint(args.checkpoint)
    size = C.train_config(cfg).image_size
    ident = ck.registry.identity(args.identity, args.namespace)
    if args.camera is None:
        view = ck.registry.view(args.modality, None, args.view_dataset or "all")
    else:
        view = ck.registry.view(args.modality, args.camera, args.view_dataset or args.namespace)
    scfg = SamplerConfig(cfg["sampler_steps"], cfg["sampler_method"], cfg["seed"], args.n)
    imgs = sample(PromptSpec(ident, view), scfg, ck.model, ck.registry, ck.encoder, ck.sched,
                  ck.adapters, size)
    args.out.mkdir(parents=True, exist_ok=True)
    for k, img in enumerate(imgs):
        save_image(img.numpy(), args.out / f"{ident.surface}_{view.surface}_{k:03d}.png")
    print(f"wrote {len(imgs)} images to {args.out}")


def cmd_expand(args, cfg, jobs=1):
    from .pipeline import infrared_view_tokens

    ck = load_checkpoint(args.checkpoint)
    vi, ext = ingest_manifest(args.vi), ingest_manifest(args.ext)
    namespaces = sorted({r.dataset_id for r in ext})
    if len(namespaces) != 1:
        raise ValueError(f"external manifest must hold one dataset, found {namespaces}")
    tcfg = C.train_config(cfg)
    offset = cfg["id_offset"] if cfg["id_offset"] >= 0 else vi.max_identity() + 1
    plan = ExpansionPlan(ck, select_identities(ext, cfg["min_images"]), namespaces[0],
                         infrared_view_tokens(ck.registry, vi, tcfg.view_granularity), args.out,
                         images_per_view=cfg["images_per_view"], seed=cfg["seed"],
                         id_offset=offset, sampler=C.sampler_config(cfg),
                         image_size=tcfg.image_size)
    res = expand(plan, jobs=jobs)
    print(f"{len(res.corpus)} synthetic records ({len(res.generated_cells)} cells generated, "
          f"{len(res.resumed_cells)} resumed) -> {res.manifest_path}")


def cmd_evaluate(args, cfg):
    from .estimators import PixelFeatureExtractor, ToyReidExtractor
    from .metrics import FeatureSet, cmc_map, fid, moment_summary
    from .pipeline import load_corpus_images
    from .report import MetricReport
    from .toy import render_reid_training_set

    size = C.train_config(cfg).image_size
    query, gallery = ingest_manifest(args.query), ingest_manifest(args.gallery)
    qx = load_corpus_images(query, _manifest_root(args.query), size)
    gx = load_corpus_images(gallery, _manifest_root(args.gallery), size)
    if args.extractor == "pixel":
        extractor = PixelFeatureExtractor().fit(qx)
    else:
        X, y, _ = render_reid_training_set(48, 6, size, cfg["seed"] + 1)
        extractor = ToyReidExtractor(seed=cfg["seed"]).fit(X, y)

    def features(corpus, x):
        return FeatureSet(extractor.transform(x), [r.identity for r in corpus],
                          [r.modality for r in corpus], [r.camera_id for r in corpus])

    report = MetricReport()
    fq = features(query, qx)
    report.set_retrieval(cmc_map(fq, features(gallery, gx)))
    if args.fid_real is not None:
        real = ingest_manifest(args.fid_real)
        rx = load_corpus_images(real, _manifest_root(args.fid_real), size)
        report.fid = fid(moment_summary(extractor.transform(rx)), moment_summary(fq))
    report.counts = {"queries": len(query), "gallery": len(gallery)}
    report.provenance = {"extractor": args.extractor, "seed": cfg["seed"]}
    args.out.mkdir(parents=True, exist_ok=True)
    report.save(args.out / "report.json")
    print(report.summary())


def cmd_toy_demo(args, cfg, jobs=1):
    from .pipeline import run_toy_demo

    res = run_toy_demo(args.out, cfg, base_path=args.base, jobs=jobs)
    print(res.report.summary())
    print(f"report: {args.out / 'report.json'}")


COMMANDS = {"ingest": cmd_ingest, "stats": cmd_stats, "train": cmd_train, "sample": cmd_sample,
            "expand": cmd_expand, "evaluate": cmd_evaluate, "toy-demo": cmd_toy_demo}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help(sys.stderr)
            return EXIT_USAGE
        logging.basicConfig(level=logging.WARNING - 10 * min(args.verbose, 2),
                            format="%(levelname)s %(name)s: %(message)s")
        cfg = _effective(args)
        out = getattr(args, "out", None)
        if out is not None:
            C.write_snapshot(cfg, out, args.command,
                             extra={k: str(v) for k, v in _inputs(args).items()})
        fn = COMMANDS[args.command]
        if args.command in ("expand", "toy-demo"):
            fn(args, cfg, jobs=int(cfg["jobs"]))
        else:
            fn(args, cfg)
        return EXIT_OK
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return EXIT_USAGE
    except C.ConfigError as exc:
        print(f"dive: config error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (NonFiniteLossError, FloatingPointError) as exc:
        print(f"dive: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ManifestError, EmptyCorpusError, CheckpointError, UnregisteredTokenError,
            RegistryError, ExpansionError, FileNotFoundError, OSError, ValueError,
            KeyError) as exc:
        print(f"dive: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
