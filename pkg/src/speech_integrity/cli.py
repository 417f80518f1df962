"""``speechverifier`` command line.

Exit codes: 0 success (verify: Accept), 1 verify Reject, 2 usage, data or
configuration error, 3 audio too short.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys

from .audio import read_wav, write_wav
from .checkpoint import ModelCheckpoint
from .config import ENV_VAR, ToolkitConfig, dump_config, load_config
from .corpus import read_manifest, synthetic_corpus, write_corpus
from .errors import ConfigMismatch, SpeechIntegrityError
from .evaluation import (export_embeddings, run_protocol, sha256_study, similarity_study,
                         substitution_sweep)
from .evaluation import dev_scores as protocol_scores
from .model.network import bits_to_hex
from .ops import MaliciousOp, apply_benign, apply_malicious, parse_op_spec
from .training import train
from .verify import REFERENCE_THETA, VerifierConfig, calibrate_threshold, sign, verify

log = logging.getLogger("speech_integrity")

INFO_HASH_KEY = "ICMT"
INFO_SOFTWARE_KEY = "ISFT"
SOFTWARE = "speech-integrity"


class CliError(SpeechIntegrityError):
    pass


def _emit(obj) -> None:
    sys.stdout.write(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _hash_tag(config: ToolkitConfig) -> str:
    return f"config_hash={config.config_hash}"


def _file_hash(info: dict) -> str | None:
    text = info.get(INFO_HASH_KEY, "")
    return text.split("=", 1)[1] if text.startswith("config_hash=") else None


def _checkpoint_path(config: ToolkitConfig, override: str | None) -> str:
    if override:
        return override
    if config.checkpoint:
        return config.resolve(config.checkpoint)
    return os.path.join(config.resolve(config.output_dir), "checkpoint.svck")


def _load_checkpoint(config: ToolkitConfig, args) -> ModelCheckpoint:
    ckpt = ModelCheckpoint.load(_checkpoint_path(config, getattr(args, "checkpoint", None)))
    recorded = ckpt.meta.get("config_hash")
    if recorded != config.config_hash and not args.force:
        raise ConfigMismatch(f"checkpoint was trained under config {recorded}, current config "
                             f"is {config.config_hash} (use --force to override)")
    return ckpt


def is_reference_scale(ckpt: ModelCheckpoint) -> bool:
    mc = ckpt.model_config
    return mc.lstm_hidden >= 256 and mc.proj_hidden >= 512


def _verifier(config: ToolkitConfig, ckpt: ModelCheckpoint, args) -> VerifierConfig:
    theta = config.verifier.theta if args.theta is None else args.theta
    uncalibrated = args.theta is None and not config.verifier.calibrated
    if (uncalibrated and theta == REFERENCE_THETA and not is_reference_scale(ckpt)
            and not args.allow_reference_theta):
        raise CliError("theta=42 was calibrated for the reference-scale system; run `calibrate` "
                       "for this checkpoint or pass --allow-reference-theta")
    return VerifierConfig(int(theta), ckpt, config.watermark)


def _manifest(config: ToolkitConfig, override: str | None, which: str):
    path = override or config.resolve(getattr(config.corpus, which))
    if not path:
        raise CliError(f"no {which} manifest given (config [corpus].{which} or --manifest)")
    return read_manifest(path)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------

def cmd_train(args, config: ToolkitConfig) -> int:
    corpus = _manifest(config, args.manifest, "train")
    dev = read_manifest(config.resolve(config.corpus.dev)) if config.corpus.dev else None
    out_dir = args.out or config.resolve(config.output_dir)
    os.makedirs(out_dir, exist_ok=True)
    resume = None
    if args.resume:
        path = args.resume if args.resume != "auto" else os.path.join(out_dir, "checkpoint.svck")
        if os.path.exists(path) or args.resume != "auto":
            resume = ModelCheckpoint.load(path)
            if resume.meta.get("config_hash") != config.config_hash and not args.force:
                raise ConfigMismatch("resume checkpoint was written under a different config")
    tc = config.training
    result = train(corpus, config.model, tc, config.features, config.watermark,
                   out_dir=out_dir, resume=resume, dev_corpus=dev,
                   cache_dir=os.path.join(out_dir, "feature_cache") if args.cache else None,
                   stop_after_epochs=args.stop_after,
                   meta={"config_hash": config.config_hash})
    ckpt = result.checkpoint
    path = os.path.join(out_dir, "checkpoint.svck")
    ckpt.save(path)
    _emit({"checkpoint": path, "checkpoint_id": ckpt.checkpoint_id, "epochs": ckpt.epoch,
           "config_hash": config.config_hash,
           "final_loss": result.log_rows[-1]["loss"] if result.log_rows else None})
    return 0


def cmd_sign(args, config: ToolkitConfig) -> int:
    ckpt = _load_checkpoint(config, args)
    x = read_wav(args.input)
    signed, bits = sign(x, ckpt, config.watermark)
    write_wav(signed, args.output, args.bit_depth,
              {INFO_SOFTWARE_KEY: SOFTWARE, INFO_HASH_KEY: _hash_tag(config)})
    sys.stdout.write(bits_to_hex(bits) + "\n")
    return 0


def cmd_verify(args, config: ToolkitConfig) -> int:
    ckpt = _load_checkpoint(config, args)
    vc = _verifier(config, ckpt, args)
    x, info = read_wav(args.input, with_info=True)
    tagged = _file_hash(info)
    if tagged is not None and tagged != config.config_hash and not args.force:
        raise ConfigMismatch(f"{args.input} was signed under config {tagged}, current config "
                             f"is {config.config_hash} (use --force to override)")
    res = verify(x, vc)
    _emit({"path": args.input, "distance": res.distance, "theta": res.theta,
           "decision": res.decision.value, "per_segment_errors": list(res.per_segment_errors),
           "checkpoint_id": ckpt.checkpoint_id, "config_hash": config.config_hash})
    return 0 if res.accepted else 1


def cmd_simulate(args, config: ToolkitConfig) -> int:
    parsed = parse_op_spec(args.op)
    x = read_wav(args.input)
    if parsed[0] == "benign":
        out = apply_benign(x, parsed[1])
        record = {"op": parsed[1].describe(), "sample_rate": out.sample_rate,
                  "output_samples": len(out), "edited_intervals": []}
    else:
        _, kind, level, ratio = parsed
        donor = read_wav(args.donor) if args.donor else None
        rec = apply_malicious(x, MaliciousOp(kind, level, args.seed, donor, ratio))
        out, record = rec.output, rec.to_dict()
    write_wav(out, args.output, args.bit_depth)
    sidecar = args.output + ".json"
    with open(sidecar, "w", encoding="utf-8") as f:
        json.dump({**record, "input": args.input, "seed": args.seed}, f, indent=2,
                  sort_keys=True)
    _emit({"output": args.output, "record": sidecar})
    return 0


def _write(path, text) -> None:
    with open(path, "w", encoding="utf-8") as f:
        f.write(text)


def cmd_evaluate(args, config: ToolkitConfig) -> int:
    ckpt = _load_checkpoint(config, args)
    vc = _verifier(config, ckpt, args)
    corpus = _manifest(config, args.manifest, "test")
    out_dir = args.out or os.path.join(config.resolve(config.output_dir), "eval")
    os.makedirs(out_dir, exist_ok=True)
    report = run_protocol(corpus, vc, seed=config.seed, watermark=config.watermark,
                          jobs=args.jobs)
    report.config["config_hash"] = config.config_hash
    _write(os.path.join(out_dir, "protocol.json"), report.to_json() + "\n")
    _write(os.path.join(out_dir, "protocol.csv"), report.to_csv())
    _write(os.path.join(out_dir, "protocol_scores.csv"), report.scores_csv())
    sweep = substitution_sweep(corpus, vc, seed=config.seed, watermark=config.watermark,
                               jobs=args.jobs)
    sweep.config["config_hash"] = config.config_hash
    _write(os.path.join(out_dir, "substitution_sweep.json"), sweep.to_json() + "\n")
    _write(os.path.join(out_dir, "substitution_sweep.csv"), sweep.to_csv())
    _emit({"overall": report.overall, "sweep": sweep.overall, "out_dir": out_dir})
    return 0


def _read_scores(path):
    pairs = []
    with open(path, encoding="utf-8") as f:
        for line in f:
            line = line.strip()
            if not line or line.startswith(("#", "distance")):
                continue
            d, label = line.split(",")[:2]
            pairs.append((int(d), label.strip()))
    return pairs


def cmd_calibrate(args, config: ToolkitConfig) -> int:
    ckpt = _load_checkpoint(config, args)
    if args.scores:
        pairs = _read_scores(args.scores)
    else:
        corpus = _manifest(config, args.manifest, "dev")
        vc = VerifierConfig(config.verifier.theta, ckpt, config.watermark)
        pairs = protocol_scores(run_protocol(corpus, vc, seed=config.seed,
                                             watermark=config.watermark, jobs=args.jobs))
    cal = calibrate_threshold(pairs)
    updated = config.with_theta(cal.theta)
    target = args.write or config.source
    if target:
        dump_config(updated, target)
    _emit({"theta": cal.theta, "FPR": cal.fpr, "FNR": cal.fnr, "n": len(pairs),
           "written_to": target})
    return 0


def cmd_study(args, config: ToolkitConfig) -> int:
    corpus = _manifest(config, args.manifest, "test")
    out_dir = args.out or os.path.join(config.resolve(config.output_dir), "study")
    os.makedirs(out_dir, exist_ok=True)
    if args.kind == "embeddings":
        ckpt = _load_checkpoint(config, args)
        path = os.path.join(out_dir, "embeddings.csv")
        _write(path, export_embeddings(corpus, ckpt, seed=config.seed))
        _emit({"embeddings": path})
        return 0
    report = (similarity_study(corpus, seed=config.seed) if args.kind == "similarity"
              else sha256_study(corpus, seed=config.seed))
    _write(os.path.join(out_dir, f"{args.kind}.json"), report.to_json() + "\n")
    _write(os.path.join(out_dir, f"{args.kind}_histogram.csv"), report.histogram_csv())
    _emit({"study": args.kind, "summary": report.summary, "out_dir": out_dir})
    return 0


def cmd_synth(args, config: ToolkitConfig) -> int:
    corpus = synthetic_corpus(args.count, seed=args.seed, speakers=args.speakers,
                              seconds=(args.min_seconds, args.max_seconds),
                              start_index=args.start)
    manifest = write_corpus(corpus, args.out)
    _emit({"manifest": manifest, "utterances": len(corpus)})
    return 0


# ---------------------------------------------------------------------------
# Parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="speechverifier",
                                description="Self-contained speech integrity verification.")
    p.add_argument("--config", help=f"TOML or JSON config (default: ${ENV_VAR})")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, checkpoint=True, theta=False, jobs=False):
        sp.add_argument("--force", action="store_true",
                        help="ignore config-hash mismatches")
        if checkpoint:
            sp.add_argument("--checkpoint", help="checkpoint path (default from config)")
        if theta:
            sp.add_argument("--theta", type=int, help="override the decision threshold")
            sp.add_argument("--allow-reference-theta", action="store_true",
                            help="accept the reference-scale theta with a desk checkpoint")
        if jobs:
            sp.add_argument("--jobs", type=int, default=1, help="worker processes")

    sp = sub.add_parser("train", help="train a fingerprint checkpoint")
    common(sp, checkpoint=False)
    sp.add_argument("--manifest", help="training manifest (default from config)")
    sp.add_argument("--out", help="output directory (default from config)")
    sp.add_argument("--resume", help="checkpoint to resume from, or 'auto'")
    sp.add_argument("--stop-after", type=int, help="stop after this many more epochs")
    sp.add_argument("--cache", action="store_true", help="cache variant features on disk")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("sign", help="fingerprint and watermark a file")
    common(sp)
    sp.add_argument("input")
    sp.add_argument("output")
    sp.add_argument("--bit-depth", default="16", choices=["16", "32f"])
    sp.set_defaults(func=cmd_sign)

    sp = sub.add_parser("verify", help="check a signed file (exit 0 Accept, 1 Reject)")
    common(sp, theta=True)
    sp.add_argument("input")
    sp.set_defaults(func=cmd_verify)

    sp = sub.add_parser("simulate", help="apply a benign or malicious operation")
    sp.add_argument("input")
    sp.add_argument("op", help='e.g. "benign:reencoding", "malicious:silencing:moderate"')
    sp.add_argument("output")
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--donor", help="donor WAV for splicing, substitution and tts_proxy")
    sp.add_argument("--bit-depth", default="32f", choices=["16", "32f"])
    sp.set_defaults(func=cmd_simulate)

    sp = sub.add_parser("evaluate", help="run the benign/malicious protocol")
    common(sp, theta=True, jobs=True)
    sp.add_argument("--manifest", help="test manifest (default from config)")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_evaluate)

    sp = sub.add_parser("calibrate", help="set theta at the equal-error point of a dev set")
    common(sp, jobs=True)
    sp.add_argument("--manifest", help="dev manifest (default from config)")
    sp.add_argument("--scores", help="CSV of distance,label instead of running the protocol")
    sp.add_argument("--write", help="config file to write (default: the loaded one)")
    sp.set_defaults(func=cmd_calibrate)

    sp = sub.add_parser("study", help="similarity / sha256 studies, embedding export")
    common(sp)
    sp.add_argument("kind", choices=["similarity", "sha256", "embeddings"])
    sp.add_argument("--manifest")
    sp.add_argument("--out")
    sp.set_defaults(func=cmd_study)

    sp = sub.add_parser("synth", help="write a synthetic speech-like corpus")
    sp.add_argument("out")
    sp.add_argument("--count", type=int, default=16)
    sp.add_argument("--seed", type=int, default=0)
    sp.add_argument("--speakers", type=int, default=8)
    sp.add_argument("--start", type=int, default=0)
    sp.add_argument("--min-seconds", type=float, default=4.2)
    sp.add_argument("--max-seconds", type=float, default=6.0)
    sp.set_defaults(func=cmd_synth)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        config = load_config(args.config)
        return args.func(args, config)
    except SpeechIntegrityError as exc:
        sys.stderr.write(json.dumps({"error": type(exc).__name__, "message": str(exc)}) + "\n")
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
