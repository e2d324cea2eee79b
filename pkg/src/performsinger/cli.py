"""Command-line driver: data-prep, train, infer, eval, ablate."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import metrics
from . import numerics as nx
from .config import ConfigError, RunConfig, describe_keys, load_config
from .experiment import run_strategy, score_model, speaker_vector, write_scores
from .frontend.audio import AudioError, F0Contour, extract_mel, griffin_lim, read_wav, write_wav
from .frontend.corpus import CorpusError, Utterance, gen_synthetic_corpus, inventory_stats, load_corpus, write_corpus
from .frontend.inventory import REST, PinyinError, check_pitch, lyrics_to_phonemes
from .frontend.textgrid import TextGridError
from .model import Item, MissingInputError, PerformSinger, make_item
from .encoders import EncoderInputError
from .training import TrainingError, load_checkpoint, train

log = logging.getLogger("performsinger")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_RUNTIME = 0, 1, 2, 3
DATA_ERRORS = (CorpusError, TextGridError, PinyinError, AudioError, MissingInputError, EncoderInputError, nx.ShapeError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _config_help() -> str:
    lines = ["config keys (override with --set key=value):"]
    lines += [f"  {key} = {json.dumps(value)}" for key, value in describe_keys()]
    return "\n".join(lines)


def _config(args) -> RunConfig:
    cfg = load_config(getattr(args, "config", None), getattr(args, "set", None))
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _add_config_args(p):
    p.add_argument("--config", help="JSON run config")
    p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE", help="override one config key")


def _load_array(path: str) -> np.ndarray:
    if path.endswith(".npy"):
        return np.load(path).astype(np.float64)
    return nx.load_tensor(path).numpy()


# ----------------------------------------------------------------- commands


def cmd_data_prep(args) -> int:
    cfg = _config(args)
    out = Path(args.out)
    if args.synthetic:
        utts = gen_synthetic_corpus(args.seed if args.seed is not None else cfg.seed, args.utterances, args.speakers, cfg.audio, cfg.video)
    else:
        if not (args.wav_dir and args.textgrid_dir and args.lip_dir):
            raise UsageError("real-data prep needs --wav-dir, --textgrid-dir and --lip-dir (or use --synthetic)")
        from .frontend.prep import prepare_directory

        utts, errors = prepare_directory(args.wav_dir, args.textgrid_dir, args.lip_dir, args.ref_dir, cfg.audio)
        for err in errors:
            print(f"error: {err}", file=sys.stderr)
        if errors:
            return EXIT_DATA
        if not utts:
            raise CorpusError(f"no utterances found under {args.wav_dir}")
    write_corpus(utts, out)
    stats = inventory_stats(utts)
    print(f"utterances: {stats['utterances']}  frames: {stats['frames']}")
    print(f"initials covered: {stats['initials_covered']}/{stats['initials_total']}")
    print(f"finals covered: {stats['finals_covered']}/{stats['finals_total']}")
    print(f"pitch range: {stats['pitch_min']}-{stats['pitch_max']}")
    (out / "stats.json").write_text(json.dumps(stats, indent=2, sort_keys=True))
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    if args.stage == "2" and not args.init_from:
        raise UsageError("--stage 2 requires --init-from <stage-1 checkpoint>")
    utts = load_corpus(args.manifest)
    result = train(utts, cfg, args.stage, init=args.init_from, out_dir=args.out, steps=args.steps)
    print(json.dumps({"checkpoint": str(result.checkpoint), "config_hash": cfg.hash(), **result.meta.get("probe_final", {})}))
    return EXIT_OK


def _item_from_args(args, model: PerformSinger) -> tuple[Item, dict]:
    if args.manifest:
        if not args.id:
            raise UsageError("--manifest needs --id")
        matches = [u for u in load_corpus(args.manifest) if u.id == args.id]
        if not matches:
            raise CorpusError(f"utterance not in {args.manifest}", args.id)
        return make_item(matches[0], with_targets=False), {"id": args.id}
    missing = [flag for flag, v in (("--lyrics", args.lyrics), ("--pitches", args.pitches), ("--lips", args.lips), ("--ref", args.ref)) if not v]
    if missing:
        raise MissingInputError(f"missing required input(s): {', '.join(missing)}")
    syllables = args.lyrics.split()
    notes = [REST if p.upper() == REST else check_pitch(int(p)) for p in args.pitches.split()]
    if len(notes) != len(syllables):
        raise CorpusError(f"{len(syllables)} syllables but {len(notes)} pitches")
    phonemes, owner = lyrics_to_phonemes(syllables)
    pitches = [notes[k] for k in owner]
    ref = read_wav(args.ref, model.cfg.audio.sample_rate) if args.ref.endswith(".wav") else None
    ref_mel = extract_mel(ref, model.cfg.audio) if ref is not None else _load_array(args.ref)
    lips = _load_array(args.lips)
    utt = Utterance("infer", phonemes, pitches, np.zeros(len(phonemes), dtype=np.int64), np.zeros((1, 80)), F0Contour([], []), lips, ref_mel, "0")
    item = make_item(utt, with_targets=False)
    return item, {"id": "infer", "phonemes": phonemes, "pitches": pitches}


def cmd_infer(args) -> int:
    model, meta = load_checkpoint(args.checkpoint)
    item, info = _item_from_args(args, model)
    out = model.infer(item, seed=args.seed, sync_scale=args.sync_scale, fps=args.fps)
    dest = Path(args.out)
    dest.mkdir(parents=True, exist_ok=True)
    nx.save_tensor(dest / "mel.tnsr", out["mel"])
    nx.save_tensor(dest / "f0.tnsr", out["f0"].to_array())
    nx.save_tensor(dest / "speaker.tnsr", out["speaker"])
    record = {
        **info,
        "durations": out["durations"].tolist(),
        "frames": int(out["mel"].shape[0]),
        "seed": args.seed,
        "sync_scale": args.sync_scale,
        "config_hash": model.cfg.hash(),
    }
    (dest / "durations.json").write_text(json.dumps(record, indent=2, sort_keys=True))
    if args.emit_wav:
        # diagnostic quality only: Griffin-Lim from the mel pseudo-inverse
        write_wav(dest / "audio.wav", griffin_lim(out["mel"].numpy(), model.cfg.audio), model.cfg.audio.sample_rate)
    print(json.dumps({"frames": record["frames"], "durations": record["durations"]}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    refs = {u.id: u for u in load_corpus(args.manifest)}
    gen_root = Path(args.generated)
    gen_ids = sorted(p.name for p in gen_root.iterdir() if (p / "mel.tnsr").exists())
    unpaired = sorted(set(gen_ids) ^ set(refs)) if args.strict else sorted(set(gen_ids) - set(refs))
    if unpaired or not gen_ids:
        raise CorpusError(f"unpaired artifacts: {', '.join(unpaired) or 'none generated'}")
    rows = []
    for uid in gen_ids:
        ref = refs[uid]
        mel = nx.load_tensor(gen_root / uid / "mel.tnsr").numpy()
        f0 = nx.load_tensor(gen_root / uid / "f0.tnsr").numpy()
        info = json.loads((gen_root / uid / "durations.json").read_text())
        aligned = F0Contour.from_array(metrics.align_by_durations(f0, info["durations"], ref.durations))
        cos = metrics.cos_sim(speaker_vector(model, mel), speaker_vector(model, ref.mel))
        rows.append(metrics.EvalRow(uid, metrics.mcd(mel, ref.mel), metrics.ffe(aligned, ref.f0), cos))
    report = metrics.EvalReport(rows, {"config_hash": model.cfg.hash()})
    if args.out:
        Path(args.out).write_text(report.to_json())
    print(report.table(args.label))
    return EXIT_OK


def cmd_ablate(args) -> int:
    base = _config(args)
    utts = load_corpus(args.manifest)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    arms = {"baseline": "baseline", "vcfm-s": "single", "vcfm-t": "two_stage"}
    summary = {}
    for name, strategy in arms.items():
        cfg = load_config(args.config, list(args.set) + [f"train.strategy={strategy}"])
        if args.seed is not None:
            cfg.seed = args.seed
        log.info("ablation arm %s (train.strategy=%s)", name, strategy)
        results = run_strategy(utts, cfg, out / name)
        report, scores = score_model(results[-1].model, utts, seed=cfg.seed)
        report.config["train.strategy"] = strategy
        write_scores(out / name / "report.json", report, scores)
        summary[name] = report
    lines = []
    for name, report in summary.items():
        table = report.table(name).splitlines()
        lines.append(table[-1] if lines else "\n".join(table[:2] + table[-1:]))
    text = "\n".join(lines)
    (out / "ablation.txt").write_text(text + "\n")
    print(text)
    return EXIT_OK


# ------------------------------------------------------------------ parser


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(
        prog="performsinger",
        description="Multimodal duration-free singing voice synthesis.",
        epilog=_config_help() + "\n\nenvironment: PERFORMSINGER_THREADS bounds torch worker threads.\n"
        "exit codes: 0 success, 1 usage, 2 data validation, 3 runtime.",
        formatter_class=argparse.RawDescriptionHelpFormatter,
    )
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("data-prep", help="build a manifest + TNSR feature files")
    _add_config_args(p)
    p.add_argument("--out", required=True)
    p.add_argument("--synthetic", action="store_true")
    p.add_argument("--seed", type=int)
    p.add_argument("--utterances", type=int, default=16)
    p.add_argument("--speakers", type=int, default=2)
    p.add_argument("--wav-dir")
    p.add_argument("--textgrid-dir")
    p.add_argument("--lip-dir")
    p.add_argument("--ref-dir")
    p.set_defaults(func=cmd_data_prep)

    p = sub.add_parser("train", help="run one training stage")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--stage", required=True, choices=["1", "2", "single"])
    p.add_argument("--init-from")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--steps", type=int, help="override the stage's step count")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="duration-free synthesis (no duration input is accepted)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--lyrics", help="space-separated toneless pinyin syllables")
    p.add_argument("--pitches", help="one MIDI note (or REST) per syllable")
    p.add_argument("--lips", help="lip frames (.npy or .tnsr, m x 48 x 48)")
    p.add_argument("--ref", help="reference audio (.wav) or reference log-mel (.tnsr)")
    p.add_argument("--manifest", help="take inputs (never durations) from a manifest record")
    p.add_argument("--id")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--sync-scale", action="store_true", help="rescale durations to the video frame budget")
    p.add_argument("--fps", type=float)
    p.add_argument("--emit-wav", action="store_true", help="also write a diagnostic Griffin-Lim waveform")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score generated artifacts against a reference manifest")
    p.add_argument("--checkpoint", required=True, help="speaker encoder used for COS")
    p.add_argument("--generated", required=True, help="directory of <id>/mel.tnsr, f0.tnsr, durations.json")
    p.add_argument("--manifest", required=True)
    p.add_argument("--strict", action="store_true", help="also fail on references without generated output")
    p.add_argument("--label", default="")
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train + score baseline, single-stage and two-stage arms")
    _add_config_args(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("PERFORMSINGER_THREADS")
    if threads:
        try:
            torch.set_num_threads(max(1, int(threads)))
        except ValueError:
            print(f"error: PERFORMSINGER_THREADS={threads!r} is not an integer", file=sys.stderr)
            return EXIT_USAGE
    try:
        return args.func(args)
    except (UsageError, ConfigError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DATA_ERRORS as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingError, RuntimeError, OSError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
