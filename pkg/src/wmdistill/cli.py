"""Command-line entry point.

Exit codes: 0 success, 1 unexpected error, 2 configuration or usage error
(bad config key, bad payload, unknown attack kind), 3 training divergence,
4 clip too short to decode.  Results go to stdout; diagnostics to stderr.
"""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_TOO_SHORT = 4


class CliError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _err(msg: str) -> None:
    print(f"error: {msg}", file=sys.stderr)


def _out(obj) -> None:
    print(json.dumps(obj, indent=2, sort_keys=True))


def _load_cfg(path, overrides, seed):
    from .config import ConfigError, load_config

    overrides = list(overrides or [])
    if seed is not None:
        overrides.append(f"seed={seed}")
    try:
        return load_config(path, overrides)
    except ConfigError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _load_model(path):
    from .diffengine import CheckpointError
    from .watermark_net import WatermarkModel

    try:
        return WatermarkModel.load(path)
    except FileNotFoundError as exc:
        raise CliError(f"checkpoint '{path}' not found", EXIT_CONFIG) from exc
    except (CheckpointError, KeyError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot load checkpoint '{path}': {exc}", EXIT_CONFIG) from exc


def _sync_code(model, config_path) -> int:
    """Sync code from an explicit config file, else the one the checkpoint was trained with."""
    if config_path:
        return _load_cfg(config_path, [], None).sync_code
    run = model.meta.get("run_config") or {}
    return int(run.get("sync_code", 0xA6))


def _read(path, rate: int = 24000):
    from .dsp import WavFormatError, read_wav

    try:
        return read_wav(path, target_rate=rate)
    except FileNotFoundError as exc:
        raise CliError(f"input '{path}' not found", EXIT_CONFIG) from exc
    except WavFormatError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def _check_length(clip, model) -> None:
    n = model.stft.fft_size
    if clip.samples.size < n:
        raise CliError(f"clip has {clip.samples.size} samples, at least {n} are needed", EXIT_TOO_SHORT)


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_train(args) -> int:
    from .training import TrainingDiverged, train_teacher

    cfg = _load_cfg(args.config, args.set, args.seed)
    try:
        res = train_teacher(cfg, args.out)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    _out({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics_path), "best": res.best})
    return EXIT_OK


def cmd_distill(args) -> int:
    from .training import CheckpointMismatch, TrainingDiverged, direct_distill_baseline, distill_student

    cfg = _load_cfg(args.config, args.set, args.seed)
    try:
        if args.direct:
            res = direct_distill_baseline(args.teacher, cfg, args.out)
        else:
            res = distill_student(args.teacher, cfg, args.out)
    except TrainingDiverged as exc:
        raise CliError(str(exc), EXIT_DIVERGED) from exc
    except CheckpointMismatch as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc
    _out({"checkpoint": str(res.checkpoint), "metrics": str(res.metrics_path)})
    return EXIT_OK


def cmd_embed(args) -> int:
    from .dsp import AudioClip, write_wav
    from .metrics import snr_db
    from .watermark_net import Message, hex_to_bits

    model = _load_model(args.ckpt)
    cfg = model.enc_cfg
    try:
        payload = hex_to_bits(args.payload, cfg.payload_len)
    except ValueError as exc:
        raise CliError(f"bad payload '{args.payload}': {exc}", EXIT_CONFIG) from exc
    sync = _sync_code(model, args.config)
    bits = Message.from_payload(payload, sync, cfg.sync_len).bits
    clip = _read(args.input)
    _check_length(clip, model)
    x_w = model.embed_array(clip.samples, bits)
    write_wav(AudioClip(x_w, clip.sample_rate), args.output)
    _out({"output": str(args.output), "snr_db": snr_db(clip.samples, x_w), "bits": "".join(map(str, bits))})
    return EXIT_OK


def cmd_extract(args) -> int:
    from .watermark_net import bits_to_hex

    model = _load_model(args.ckpt)
    clip = _read(args.input)
    _check_length(clip, model)
    bits = (model.logits_array(clip.samples) > 0).astype(np.int64)
    cfg = model.dec_cfg
    _out({"payload_hex": bits_to_hex(bits[cfg.sync_len:]), "bits": "".join(map(str, bits))})
    return EXIT_OK


def cmd_detect(args) -> int:
    from .metrics import ClipTooShort, detect

    model = _load_model(args.ckpt)
    clip = _read(args.input)
    _check_length(clip, model)
    try:
        res = detect(clip, model, _sync_code(model, args.config), args.threshold)
    except ClipTooShort as exc:
        raise CliError(str(exc), EXIT_TOO_SHORT) from exc
    verdict = "watermarked" if res.is_watermarked else "not watermarked"
    _out({"decision": verdict, **res.to_dict()})
    return EXIT_OK


def _parse_params(items) -> dict:
    params = {}
    for item in items or []:
        if "=" not in item:
            raise CliError(f"attack parameter '{item}' is not of the form name=value", EXIT_CONFIG)
        k, v = item.split("=", 1)
        try:
            params[k] = json.loads(v)
        except json.JSONDecodeError:
            params[k] = v
    return params


def cmd_attack(args) -> int:
    from .attacks import KINDS, AttackError, AttackSpec, apply
    from .dsp import write_wav

    try:
        spec = AttackSpec(args.kind, _parse_params(args.param), seed=args.seed)
    except AttackError as exc:
        raise CliError(f"{exc}; valid kinds: {', '.join(KINDS)}", EXIT_CONFIG) from exc
    clip = _read(args.input, rate=None)
    outcome = apply(spec, clip)
    write_wav(outcome.audio, args.output)
    _out({"output": str(args.output), "kind": spec.kind, "params": spec.params})
    return EXIT_OK


def _eval_clips(args):
    from .corpus import CorpusError, CorpusSpec, generate_corpus

    try:
        if args.wav_dir:
            spec = CorpusSpec(source="wav_dir", wav_dir=args.wav_dir, clip_seconds=args.clip_seconds,
                              n_clips=args.clips, splits=(1.0, 0.0, 0.0))
        else:
            spec = CorpusSpec(clip_seconds=args.clip_seconds, n_clips=args.clips, splits=(1.0, 0.0, 0.0))
        return [c.samples for c in generate_corpus(spec, args.seed)]
    except CorpusError as exc:
        raise CliError(str(exc), EXIT_CONFIG) from exc


def cmd_evaluate(args) -> int:
    from .attacks import KINDS, AttackError, canonical_kind
    from .metrics import TABLE_ORDER, evaluate

    try:
        kinds = [canonical_kind(k) for k in args.attacks.split(",")] if args.attacks else list(TABLE_ORDER)
    except AttackError as exc:
        raise CliError(f"{exc}; valid kinds: {', '.join(KINDS)}", EXIT_CONFIG) from exc
    clips = _eval_clips(args)
    reports = {}
    for ckpt in args.ckpt:
        model = _load_model(ckpt)
        rep = evaluate(model, clips, kinds, seed=args.seed, sync_code=_sync_code(model, args.config))
        reports[ckpt] = rep
        print(f"{ckpt}\n{rep.to_table()}", file=sys.stderr)
    payload = {k: r.to_dict() for k, r in reports.items()}
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n")
    _out(payload)
    return EXIT_OK


def cmd_bench(args) -> int:
    from .metrics import bench_rtf
    from .watermark_net import STUDENT_CONFIG, TEACHER_CONFIG, WatermarkModel, init_params

    results = {}
    targets = list(args.ckpt or []) + [f"preset:{p}" for p in (args.preset or [])]
    if not targets:
        raise CliError("give at least one checkpoint or --preset", EXIT_CONFIG)
    for target in targets:
        if target.startswith("preset:"):
            name = target.split(":", 1)[1]
            cfg = {"teacher": TEACHER_CONFIG, "student": STUDENT_CONFIG}[name]
            model = WatermarkModel.teacher(init_params(cfg, args.seed, identity=False), cfg)
        else:
            model = _load_model(target)
        rep = bench_rtf(model, args.seconds, args.repeats, seed=args.seed)
        results[target] = rep.to_dict()
        print(f"{target}: rtf={rep.rtf:.4f} gflops/s={rep.gflops_estimate:.2f}", file=sys.stderr)
    if args.out:
        Path(args.out).write_text(json.dumps(results, indent=2) + "\n")
    _out(results)
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="wmdistill", description="Speech watermarking with an invertible network "
                                "teacher and a distilled student encoder.")
    sub = p.add_subparsers(dest="command", required=True)

    def run_opts(sp):
        sp.add_argument("config", help="JSON run config")
        sp.add_argument("--out", required=True, help="output directory")
        sp.add_argument("--set", action="append", metavar="KEY=VALUE", help="dotted-key override, repeatable")
        sp.add_argument("--seed", type=int, default=None)

    sp = sub.add_parser("train", help="train a teacher model")
    run_opts(sp)
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("distill", help="distil a teacher into a student encoder")
    sp.add_argument("teacher", help="teacher checkpoint")
    run_opts(sp)
    sp.add_argument("--direct", action="store_true", help="mixing factor fixed at 1 (direct distillation)")
    sp.set_defaults(func=cmd_distill)

    sp = sub.add_parser("embed", help="watermark a WAV file")
    sp.add_argument("ckpt")
    sp.add_argument("input")
    sp.add_argument("payload", help="payload as hex")
    sp.add_argument("output")
    sp.add_argument("--config", help="run config supplying the sync code")
    sp.set_defaults(func=cmd_embed)

    sp = sub.add_parser("extract", help="decode the payload of a WAV file")
    sp.add_argument("ckpt")
    sp.add_argument("input")
    sp.set_defaults(func=cmd_extract)

    sp = sub.add_parser("detect", help="decide whether a WAV file carries a watermark")
    sp.add_argument("ckpt")
    sp.add_argument("input")
    sp.add_argument("--threshold", type=int, default=7)
    sp.add_argument("--config", help="run config supplying the sync code")
    sp.set_defaults(func=cmd_detect)

    sp = sub.add_parser("attack", help="apply one distortion to a WAV file")
    sp.add_argument("kind")
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--param", action="append", metavar="NAME=VALUE")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_attack)

    sp = sub.add_parser("evaluate", help="per-attack BER, SNR and detection F1")
    sp.add_argument("ckpt", nargs="+")
    sp.add_argument("--wav-dir")
    sp.add_argument("--clips", type=int, default=20)
    sp.add_argument("--clip-seconds", type=float, default=1.0)
    sp.add_argument("--attacks", help="comma-separated kinds (default: all)")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--config", help="run config supplying the sync code")
    sp.add_argument("--out", help="write the JSON report here")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("bench", help="single-threaded real-time factor and FLOPs estimate")
    sp.add_argument("ckpt", nargs="*")
    sp.add_argument("--preset", action="append", choices=["teacher", "student"],
                    help="benchmark a randomly initialised full-size configuration")
    sp.add_argument("--seconds", type=float, default=1.0)
    sp.add_argument("--repeats", type=int, default=5)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_bench)
    return p


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    try:
        return args.func(args)
    except CliError as exc:
        _err(str(exc))
        return exc.code
    except KeyboardInterrupt:
        return 130


if __name__ == "__main__":
    sys.exit(main())
