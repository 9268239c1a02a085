"""Command-line entry point: ``pal gen|train|probe|ladder|simmap|gradcheck``.

Exit codes: 0 ok, 1 a verification check failed, 2 configuration error,
3 I/O error, 4 numeric abort during training.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import replace
from pathlib import Path

from . import __version__
from .binfmt import CheckpointFormatError
from .config import ConfigError, RunConfig, load_config
from .corpus import CorpusFormatError, generate_corpus, read_corpus, write_corpus
from .encoder import load_params
from .trainer import NonFiniteLossError, train
from .transform import Mode

EXIT_OK, EXIT_CHECK, EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 0, 1, 2, 3, 4

log = logging.getLogger("pallab")


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _config(args) -> RunConfig:
    return load_config(getattr(args, "config", None))


def _write_new(path: Path, data: bytes | str, force: bool) -> None:
    if path.exists() and not force:
        raise CliError(f"{path} exists; pass --force to overwrite", EXIT_IO)
    path.parent.mkdir(parents=True, exist_ok=True)
    if isinstance(data, str):
        path.write_text(data, encoding="utf-8")
    else:
        path.write_bytes(data)


def _load_corpus(path):
    if path is None:
        raise CliError("a corpus file is required (--corpus)", EXIT_IO)
    return read_corpus(path)


def _load_checkpoint(path):
    if not Path(path).is_file():
        raise CliError(f"checkpoint not found: {path}", EXIT_IO)
    return load_params(path)


# ------------------------------------------------------------------ commands


def cmd_gen(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise CliError(f"{out} exists; pass --force to overwrite", EXIT_IO)
    print(f"seed: {cfg.corpus_seed}")
    corpus = generate_corpus(cfg.corpus_seed, cfg.corpus)
    out.parent.mkdir(parents=True, exist_ok=True)
    manifest = write_corpus(corpus, out)
    print(f"wrote {manifest['count']} videos ({cfg.corpus.t_frames} x {cfg.corpus.d_frame}) to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    train_cfg = cfg.train
    if args.mode is not None:
        try:
            Mode(args.mode)
        except ValueError:
            raise CliError(f"unknown mode {args.mode}; expected 0-4", EXIT_CONFIG) from None
        train_cfg = replace(train_cfg, mode=args.mode)
    if args.seed is not None:
        train_cfg = replace(train_cfg, seed=args.seed)
    cfg = replace(cfg, train=train_cfg)
    corpus = _load_corpus(args.corpus)
    out = Path(args.out)
    effective = out / "config.toml"
    if args.resume:
        if not effective.exists():
            raise CliError(f"nothing to resume in {out}", EXIT_IO)
        if effective.read_text(encoding="utf-8") != cfg.to_toml():
            raise CliError("resume config differs from the run directory's config.toml", EXIT_CONFIG)
    else:
        out.mkdir(parents=True, exist_ok=True)
        effective.write_text(cfg.to_toml(), encoding="utf-8")
    print(f"seed: {train_cfg.seed}")
    print(f"mode: {train_cfg.mode}")
    try:
        result = train(train_cfg, corpus, out, resume=args.resume, stop_after_epoch=args.stop_after_epoch)
    except NonFiniteLossError as exc:
        print(f"error: {exc}; state dumped to {exc.dump_path}", file=sys.stderr)
        return EXIT_NUMERIC
    epochs = result.log.epochs()
    if epochs:
        print(f"epochs: {len(epochs)}  final train loss: {epochs[-1]['train_loss']:.6f}")
    print(f"run directory: {out}")
    return EXIT_OK


def cmd_probe(args) -> int:
    from .probe import ProbeReport, equivariance_gap, localization_probe, sim_gaps

    cfg = _config(args)
    params = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    pc = cfg.probe
    print(f"seed: {pc.seed}")
    tcfg = cfg.train.transform
    gap = equivariance_gap(params, corpus, n_pairs=pc.n_pairs, seed=pc.seed, cfg=tcfg)
    sims = sim_gaps(params, corpus, n_videos=pc.sim_videos, seed=pc.seed)
    loc = localization_probe(params, corpus, seed=pc.seed, n_train=pc.n_train, n_test=pc.n_test, cfg=tcfg)
    report = ProbeReport(
        seeds=[pc.seed],
        config_hash=cfg.train.digest(),
        alignment_gap={"gap": gap.gap, "stderr": gap.stderr, "positive": gap.positive,
                       "mismatched": gap.mismatched, "n_pairs": gap.n_pairs, "seed": gap.seed},
        contrast_gap={t: {**v, "seed": pc.seed} for t, v in sims.items()},
        localization={"checkpoint": {"mean_tiou": loc.mean_tiou, "stderr": loc.stderr,
                                     "n_train": loc.n_train, "n_test": loc.n_test, "seed": loc.seed}},
    )
    text = report.to_json()
    if args.report:
        _write_new(Path(args.report), text, force=True)
        print(f"report: {args.report}")
    else:
        sys.stdout.write(text)
    print(f"alignment gap {gap.gap:+.4f} +/- {gap.stderr:.4f}; mean tIoU {loc.mean_tiou:.4f}")
    return EXIT_OK


def cmd_ladder(args) -> int:
    from .probe import ablation_ladder, ladder_checks

    cfg = _config(args)
    corpus = _load_corpus(args.corpus)
    pc = cfg.probe
    print(f"seeds: {list(pc.ladder_seeds)}")
    report = ablation_ladder(cfg.train, corpus, pc.ladder_seeds, pc.ladder_modes, probe_seed=pc.seed,
                             n_train=pc.n_train, n_test=pc.n_test)
    text = report.to_json()
    if args.report:
        _write_new(Path(args.report), text, force=True)
    else:
        sys.stdout.write(text)
    for mode, row in sorted(report.localization.items()):
        print(f"mode #{mode}: mean tIoU {row['mean']:.4f} +/- {row['stderr']:.4f} over {row['n_seeds']} seeds")
    if set(pc.ladder_modes) != {0, 1, 2, 3, 4}:
        return EXIT_OK
    checks = ladder_checks(report.localization)
    for name, ok in checks.items():
        print(f"{'PASS' if ok else 'FAIL'} {name}")
    return EXIT_OK if all(checks.values()) else EXIT_CHECK


def cmd_simmap(args) -> int:
    from .probe import default_background, sim_matrix

    params = _load_checkpoint(args.checkpoint)
    corpus = _load_corpus(args.corpus)
    by_id = {v.id: v for v in corpus.videos}
    if args.video_id not in by_id:
        raise CliError(f"video id {args.video_id} not in corpus", EXIT_CONFIG)
    video = by_id[args.video_id]
    print(f"seed: {args.seed}")
    try:
        sm = sim_matrix(params, video, args.transform, default_background(corpus, video), seed=args.seed)
    except ValueError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from None
    text = sm.to_csv()
    if args.out:
        _write_new(Path(args.out), text, force=True)
        print(f"block gap {sm.block_gap():+.4f}; region [{sm.s}, {sm.e}] -> {args.out}")
    else:
        sys.stdout.write(text)
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    from .verify import run_scope

    print("seeds: 0-19")
    results = run_scope(args.scope)
    worst: dict[str, float] = {}
    for r in results:
        worst[r.name] = max(worst.get(r.name, 0.0), r.error)
    failed = [r for r in results if not r.ok]
    for name, err in worst.items():
        tol = next(r.tol for r in results if r.name == name)
        print(f"{'PASS' if err < tol else 'FAIL'} {name:<18} max rel err {err:.3e} (tol {tol:g})")
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    return EXIT_CHECK if failed else EXIT_OK


# -------------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="pal", description="Pseudo action localization pre-training lab.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="generate a synthetic corpus file")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", help="run pre-training into a run directory")
    t.add_argument("--config")
    t.add_argument("--corpus", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--mode", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", action="store_true")
    t.add_argument("--stop-after-epoch", type=int, help=argparse.SUPPRESS)
    t.set_defaults(func=cmd_train)

    pr = sub.add_parser("probe", help="equivariance, similarity and localization probes")
    pr.add_argument("--config")
    pr.add_argument("--checkpoint", required=True)
    pr.add_argument("--corpus", required=True)
    pr.add_argument("--report")
    pr.set_defaults(func=cmd_probe)

    la = sub.add_parser("ladder", help="train every mode over several seeds and compare")
    la.add_argument("--config")
    la.add_argument("--corpus", required=True)
    la.add_argument("--report")
    la.set_defaults(func=cmd_ladder)

    s = sub.add_parser("simmap", help="export a clip similarity matrix as CSV")
    s.add_argument("--checkpoint", required=True)
    s.add_argument("--corpus", required=True)
    s.add_argument("--video-id", type=int, required=True)
    s.add_argument("--transform", choices=("identity", "downshift", "upshift"), default="identity")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--out")
    s.set_defaults(func=cmd_simmap)

    gc = sub.add_parser("gradcheck", help="compare tape gradients with finite differences")
    gc.add_argument("--scope", choices=("ops", "loss", "all"), default="all")
    gc.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CorpusFormatError, CheckpointFormatError, OSError) as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
