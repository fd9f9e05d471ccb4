"""Command-line pipeline: data synthesis, training, tokenization, continuation,
and evaluation, with per-run reproducibility records."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import baseline as B
from . import codec as C
from . import dsp
from . import evaluate as E
from . import lm as L
from .checkpoint import config_digest, save_tokens
from .config import ConfigError, OUT_ROOT_ENV, RunConfig, default_config, \
    validate_config

EXIT_OK = 0
EXIT_RUNTIME = 1
EXIT_CONFIG = 2


class ArtifactExists(RuntimeError):
    pass


def _fail_line(stage: str, message: str):
    print(json.dumps({"status": "error", "stage": stage,
                      "message": str(message)}), file=sys.stderr)


def _fresh(path: Path, force: bool) -> Path:
    if path.exists() and not force:
        raise ArtifactExists(f"{path} exists; pass --force to replace")
    return path


def _write_record(out_dir: Path, command: str, cfg: RunConfig | None,
                  argv, consumed: dict, artifacts: list):
    out_dir.mkdir(parents=True, exist_ok=True)
    record = {
        "command": command,
        "argv": list(argv),
        "seed": cfg.seed if cfg else None,
        "config_digest": config_digest(cfg.data) if cfg else None,
        "checkpoints_consumed": consumed,
        "artifacts": [str(a) for a in artifacts],
    }
    (out_dir / f"{command}.record.json").write_text(
        json.dumps(record, indent=2, sort_keys=True) + "\n")


def _load_config(args) -> RunConfig:
    if args.config:
        cfg = validate_config(args.config)
    else:
        data = default_config()
        if args.seed is None:
            raise ConfigError(["seed: required (give --config or --seed)"])
        cfg = RunConfig(data)
    if args.seed is not None:
        cfg.data["seed"] = args.seed
    if args.out_dir is not None:
        cfg.data["out_dir"] = args.out_dir
    for w in cfg.warnings:
        print(f"warning: {w}", file=sys.stderr)
    if args.verbose and cfg.applied_defaults:
        for line in cfg.applied_defaults:
            print(f"default: {line}", file=sys.stderr)
    return cfg


def _dataset_dir(cfg: RunConfig) -> Path:
    configured = cfg["dataset"]["dir"]
    return Path(configured) if configured else cfg.out_dir / "data"


def _manifest_path(cfg: RunConfig) -> Path:
    return _dataset_dir(cfg) / "manifest.jsonl"


def _codec_path(cfg: RunConfig, override=None) -> Path:
    return Path(override) if override else cfg.out_dir / "codec.ckpt"


def _lm_path(cfg: RunConfig, override=None) -> Path:
    return Path(override) if override else cfg.out_dir / "lm.ckpt"


def _codec_cfg(cfg: RunConfig) -> C.CodecConfig:
    c = cfg["codec"]
    return C.grid_config(
        c["r_ms"], c["codebook_size"], latent_dim=c["latent_dim"],
        base_channels=c["base_channels"], residual_blocks=c["residual_blocks"],
        ema_decay=c["ema_decay"], commitment_beta=c["commitment_beta"],
        dead_code_steps=c["dead_code_steps"])


# ---------------------------------------------------------------------------
# subcommands

def cmd_synth_data(args, cfg: RunConfig) -> list:
    ds = cfg["dataset"]
    out = _dataset_dir(cfg)
    manifest_path = out / "manifest.jsonl"
    if manifest_path.exists() and not args.force:
        raise ArtifactExists(f"{manifest_path} exists; pass --force to replace")
    recipe = dsp.GeneratorConfig(duration_s=ds["duration_s"],
                                 kinds=tuple(ds["kinds"]),
                                 eval_every=ds["eval_every"])
    manifest = dsp.synth_dataset(recipe, ds["n"], cfg.seed, out)
    print(f"wrote {len(manifest.entries)} clips under {out}")
    return [manifest_path]


def cmd_train_codec(args, cfg: RunConfig) -> list:
    manifest = dsp.DatasetManifest.load(_manifest_path(cfg))
    tr = cfg["codec"]["train"]
    ckpt = _fresh(_codec_path(cfg), args.force)
    result = C.train_codec(
        manifest, _codec_cfg(cfg),
        C.CodecTrainConfig(steps=tr["steps"], batch_size=tr["batch_size"],
                           crop_samples=tr["crop_samples"], lr=tr["lr"],
                           warmup_steps=tr["warmup_steps"]),
        cfg.seed, ckpt)
    curve = cfg.out_dir / "codec_loss.jsonl"
    curve.write_text("\n".join(json.dumps(h) for h in result.loss_history) + "\n")
    init, fin = result.smoothed()
    print(f"codec: {tr['steps']} steps, smoothed loss {init:.3f} -> {fin:.3f}, "
          f"code usage {result.final_epoch_code_usage:.0%}")
    return [ckpt, curve]


def cmd_tokenize(args, cfg: RunConfig) -> tuple:
    codec_path = _codec_path(cfg, args.codec)
    codec = C.Codec.load(codec_path)
    consumed = {"codec": codec.digest()}
    if args.infile:
        w = dsp.read_wav(args.infile)
        seq = C.tokenize_waveform(w, codec)
        out = Path(args.out) if args.out else \
            cfg.out_dir / (Path(args.infile).stem + ".tok")
        _fresh(out, args.force)
        out.parent.mkdir(parents=True, exist_ok=True)
        save_tokens(out, seq.k, seq.r_samples, seq.source_t, seq.tokens)
        print(f"wrote {len(seq)} tokens to {out}")
        return [out], consumed
    manifest = dsp.DatasetManifest.load(_manifest_path(cfg))
    corpus_dir = cfg.out_dir / "tokens"
    if (corpus_dir / "corpus.json").exists() and not args.force:
        raise ArtifactExists(f"{corpus_dir} exists; pass --force to replace")
    corpus = L.tokenize_corpus(manifest, codec)
    corpus.save(corpus_dir)
    n_tok = sum(len(s) for s in corpus.sequences)
    print(f"tokenized {len(corpus.sequences)} clips ({n_tok} tokens) "
          f"into {corpus_dir}")
    return [corpus_dir / "corpus.json"], consumed


def cmd_train_lm(args, cfg: RunConfig) -> tuple:
    corpus = L.TokenCorpus.load(Path(args.corpus) if args.corpus
                                else cfg.out_dir / "tokens")
    lc = cfg["lm"]
    tr = lc["train"]
    lm_cfg = L.LmConfig(vocab_size=corpus.k + 1, num_layers=lc["num_layers"],
                        num_heads=lc["num_heads"], embed_dim=lc["embed_dim"],
                        ffn_dim=lc["ffn_dim"], max_seq_len=lc["max_seq_len"],
                        dropout=lc["dropout"])
    ckpt = _fresh(_lm_path(cfg), args.force)
    result = L.train_lm(
        corpus, lm_cfg,
        L.LmTrainConfig(steps=tr["steps"], batch_size=tr["batch_size"],
                        lr=tr["lr"], warmup_steps=tr["warmup_steps"],
                        eval_every=tr["eval_every"]),
        cfg.seed, ckpt)
    curve = cfg.out_dir / "lm_loss.jsonl"
    curve.write_text("\n".join(json.dumps(h) for h in result.loss_history) + "\n")
    last_eval = result.eval_history[-1]["loss"] if result.eval_history else None
    print(f"lm: {tr['steps']} steps, train loss {result.loss_history[-1]['loss']:.3f}"
          + (f", eval loss {last_eval:.3f}" if last_eval is not None else ""))
    return [ckpt, curve], {"corpus": corpus.source_digest}


def cmd_continue(args, cfg: RunConfig) -> tuple:
    codec = C.Codec.load(_codec_path(cfg, args.codec))
    lm_cfg, lm_params, info = L.load_lm(_lm_path(cfg, args.lm))
    sampling = L.SamplingConfig(
        temperature=args.temperature if args.temperature is not None
        else cfg["sampling"]["temperature"],
        top_k=args.top_k if args.top_k is not None else cfg["sampling"]["top_k"])
    horizon = args.horizon_tokens or cfg["sampling"]["horizon_tokens"]
    prompt = dsp.read_wav(args.prompt)
    continuation, seq = L.continue_audio(
        prompt, horizon, codec, lm_cfg, lm_params, sampling, cfg.seed,
        codec_digest=info.codec_digest or None)
    stem = Path(args.prompt).stem
    wav_out = _fresh(cfg.out_dir / f"{stem}.continuation.wav", args.force)
    tok_out = cfg.out_dir / f"{stem}.continuation.tok"
    clip_out = cfg.out_dir / f"{stem}.cmos.wav"
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(wav_out, continuation)
    save_tokens(tok_out, seq.k, seq.r_samples, seq.source_t, seq.tokens)
    dsp.write_wav(clip_out, E.assemble_cmos_clip(prompt, continuation))
    print(f"continuation: {len(seq)} tokens, {len(continuation)} samples "
          f"-> {wav_out}")
    return [wav_out, tok_out, clip_out], {"codec": codec.digest(),
                                          "lm": info.codec_digest}


def cmd_eval_snr(args, cfg: RunConfig) -> tuple:
    codec = C.Codec.load(_codec_path(cfg, args.codec))
    manifest = dsp.DatasetManifest.load(_manifest_path(cfg))
    entries = manifest.split(args.split)
    if not entries:
        raise ValueError(f"manifest has no {args.split} split")
    rows = []
    for e in entries:
        w = dsp.read_wav(e.path)
        rows.append({"id": e.clip_id,
                     "snr_db": E.reconstruction_snr(w, C.reconstruct(w, codec))})
    out = _fresh(cfg.out_dir / f"snr_{args.split}.jsonl", args.force)
    cfg.out_dir.mkdir(parents=True, exist_ok=True)
    out.write_text("\n".join(json.dumps(r) for r in rows) + "\n")
    vals = [r["snr_db"] for r in rows]
    print(f"snr over {len(vals)} {args.split} clips: "
          f"mean {np.mean(vals):.2f} dB, std {np.std(vals):.2f} dB")
    return [out], {"codec": codec.digest()}


def cmd_ablate(args, cfg: RunConfig) -> list:
    manifest = dsp.DatasetManifest.load(_manifest_path(cfg))
    ev = cfg["eval"]
    if args.grid == "full":
        r_values = ev["grid"]["r_ms"]
        k_values = ev["grid"]["codebook_size"]
    else:
        try:
            r_part, k_part = args.grid.split("x")
            r_values = [int(v) for v in r_part.split(",")]
            k_values = [int(v) for v in k_part.split(",")]
        except ValueError:
            raise ConfigError(
                [f"--grid: expected 'full' or 'R,..xK,..', got {args.grid!r}"]) \
                from None
    out = cfg.out_dir / "ablation"
    if (out / "ablation.jsonl").exists() and not args.force:
        raise ArtifactExists(f"{out}/ablation.jsonl exists; pass --force")
    budgets = E.AblationBudgets(
        codec_steps=ev["budgets"]["codec_steps"],
        eval_clips=ev["budgets"]["eval_clips"],
        train_lm_cells=ev["budgets"]["train_lm_cells"],
        lm_steps=ev["budgets"]["lm_steps"])
    report = E.run_ablation(
        manifest, r_values, k_values, budgets, cfg.seed, out,
        progress=lambda c: print(
            f"cell r={c.r_ms}ms K={c.k}: "
            + (f"snr {c.snr_db_mean:.2f} dB" if c.error is None else c.error)))
    print(report.render_table())
    return [out / "ablation.jsonl", out / "ablation.txt"]


def cmd_pack_cmos(args, cfg: RunConfig | None) -> list:
    prompt = dsp.read_wav(args.prompt)
    continuation = dsp.read_wav(args.continuation)
    clip = E.assemble_cmos_clip(prompt, continuation)
    out = Path(args.out)
    if out.exists() and not args.force:
        raise ArtifactExists(f"{out} exists; pass --force to replace")
    out.parent.mkdir(parents=True, exist_ok=True)
    dsp.write_wav(out, clip)
    print(f"wrote {len(clip)} samples to {out}")
    return [out]


# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wavelm",
        description="Discrete audio modeling: VQ codec + token LM + continuation.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", help="JSON run config")
        p.add_argument("--seed", type=int, help="override the config seed")
        p.add_argument("--out-dir",
                       help=f"output root (default: config, then ${OUT_ROOT_ENV})")
        p.add_argument("--force", action="store_true",
                       help="replace existing artifacts")
        p.add_argument("--verbose", action="store_true",
                       help="print applied config defaults")
        return p

    common(sub.add_parser("synth-data", help="generate the synthetic dataset"))
    common(sub.add_parser("train-codec", help="train the VQ codec"))

    p = common(sub.add_parser("tokenize", help="waveforms to token files"))
    p.add_argument("--in", dest="infile", help="single WAV (default: manifest)")
    p.add_argument("--out", help="token file path for --in mode")
    p.add_argument("--codec", help="codec checkpoint path")

    p = common(sub.add_parser("train-lm", help="train the token language model"))
    p.add_argument("--corpus", help="token corpus directory")

    p = common(sub.add_parser("continue", help="generate an audio continuation"))
    p.add_argument("--prompt", required=True, help="prompt WAV")
    p.add_argument("--horizon-tokens", type=int, help="units to generate")
    p.add_argument("--temperature", type=float)
    p.add_argument("--top-k", type=int)
    p.add_argument("--codec", help="codec checkpoint path")
    p.add_argument("--lm", help="lm checkpoint path")

    p = common(sub.add_parser("eval-snr", help="reconstruction SNR over a split"))
    p.add_argument("--codec", help="codec checkpoint path")
    p.add_argument("--split", default="eval", choices=["train", "eval"])

    p = common(sub.add_parser("ablate", help="run the (R, K) ablation grid"))
    p.add_argument("--grid", default="full",
                   help="'full' or 'R,..xK,..' e.g. '2,8x512,2048'")

    p = common(sub.add_parser("pack-cmos",
                              help="stitch prompt + beep + continuation"))
    p.add_argument("--prompt", required=True)
    p.add_argument("--continuation", required=True)
    p.add_argument("--out", required=True)
    return parser


HANDLERS = {
    "synth-data": cmd_synth_data,
    "train-codec": cmd_train_codec,
    "tokenize": cmd_tokenize,
    "train-lm": cmd_train_lm,
    "continue": cmd_continue,
    "eval-snr": cmd_eval_snr,
    "ablate": cmd_ablate,
    "pack-cmos": cmd_pack_cmos,
}


def run_command(argv) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_CONFIG if e.code not in (0, None) else EXIT_OK
    stage = args.command
    try:
        cfg = _load_config(args)
    except ConfigError as e:
        _fail_line(stage, "; ".join(e.errors))
        return EXIT_CONFIG
    try:
        result = HANDLERS[stage](args, cfg)
        if isinstance(result, tuple):
            artifacts, consumed = result
        else:
            artifacts, consumed = result, {}
        _write_record(cfg.out_dir, stage, cfg, argv, consumed, artifacts)
        return EXIT_OK
    except ConfigError as e:
        _fail_line(stage, "; ".join(e.errors))
        return EXIT_CONFIG
    except Exception as e:  # noqa: BLE001 - boundary: report, set exit code
        _fail_line(stage, e)
        return EXIT_RUNTIME


def main():
    sys.exit(run_command(sys.argv[1:]))


if __name__ == "__main__":
    main()
