"""Objective metrics, the resolution x vocabulary ablation grid, and
listening-clip assembly."""

from __future__ import annotations

import json
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .codec import (CodecConfig, CodecTrainConfig, GRID_CODEBOOK_SIZES, GRID_R_MS,
                    grid_config, reconstruct, train_codec)
from .dsp import DatasetManifest, Waveform, read_wav
from .lm import (LmTrainConfig, TokenCorpus, desk_config, eval_lm_loss,
                 chunk_tokens, tokenize_corpus, train_lm)

SNR_CAP_DB = 99.0


class EvalError(ValueError):
    pass


def reconstruction_snr(x, x_hat) -> float:
    """10*log10(signal power / residual power), truncate-to-min, capped at 99 dB."""
    a = x.samples if isinstance(x, Waveform) else np.asarray(x)
    b = x_hat.samples if isinstance(x_hat, Waveform) else np.asarray(x_hat)
    n = min(len(a), len(b))
    if n == 0:
        raise EvalError("empty signals")
    a = a[:n].astype(np.float64)
    b = b[:n].astype(np.float64)
    signal = float((a * a).sum())
    if signal == 0.0:
        raise EvalError("undefined SNR for silent reference")
    residual = float(((a - b) ** 2).sum())
    if residual == 0.0:
        return SNR_CAP_DB
    return min(10.0 * math.log10(signal / residual), SNR_CAP_DB)


def bits_per_token(lm_cfg, lm_params, corpus: TokenCorpus,
                   expected_digest: Optional[str] = None,
                   split: str = "eval") -> float:
    """Mean cross-entropy in bits over the corpus split's positions."""
    if expected_digest is not None and corpus.source_digest != expected_digest:
        raise EvalError(
            f"corpus digest {corpus.source_digest[:12]} does not match "
            f"checkpoint digest {expected_digest[:12]}")
    windows = [w for s in corpus.split(split)
               for w in chunk_tokens(s.tokens, lm_cfg.max_seq_len)]
    if not windows:
        raise EvalError(f"corpus has no {split} split")
    return eval_lm_loss(windows, lm_cfg, lm_params) / math.log(2.0)


# ---------------------------------------------------------------------------
# ablation grid

@dataclass
class AblationBudgets:
    codec_steps: int = 500
    codec_batch: int = 8
    codec_lr: float = 2e-3
    codec_warmup: int = 50
    crop_samples: int = 4096
    base_channels: int = 16
    latent_dim: int = 32
    eval_clips: int = 50
    train_lm_cells: bool = False
    lm_steps: int = 300
    lm_batch: int = 8
    lm_lr: float = 3e-4
    lm_max_seq_len: int = 256


@dataclass
class CellResult:
    r_ms: int
    k: int
    snr_db_mean: float = float("nan")
    snr_db_std: float = float("nan")
    codec_final_loss: float = float("nan")
    lm_eval_loss: Optional[float] = None
    tokens_per_second: float = 0.0
    error: Optional[str] = None


@dataclass
class AblationReport:
    cells: dict = field(default_factory=dict)
    metadata: dict = field(default_factory=dict)

    def cell(self, r_ms: int, k: int) -> CellResult:
        return self.cells[(r_ms, k)]

    def to_jsonl(self, path):
        lines = []
        for (r_ms, k) in sorted(self.cells):
            c = self.cells[(r_ms, k)]
            lines.append(json.dumps({
                "r_ms": c.r_ms, "k": c.k,
                "snr_db_mean": c.snr_db_mean, "snr_db_std": c.snr_db_std,
                "codec_final_loss": c.codec_final_loss,
                "lm_eval_loss": c.lm_eval_loss,
                "tokens_per_second": c.tokens_per_second,
                "error": c.error}))
        header = json.dumps({"metadata": self.metadata})
        Path(path).write_text(header + "\n" + "\n".join(lines) + "\n")

    @classmethod
    def from_jsonl(cls, path) -> "AblationReport":
        lines = [json.loads(s) for s in Path(path).read_text().splitlines()
                 if s.strip()]
        report = cls(metadata=lines[0].get("metadata", {}))
        for rec in lines[1:]:
            cell = CellResult(rec["r_ms"], rec["k"], rec["snr_db_mean"],
                              rec["snr_db_std"], rec["codec_final_loss"],
                              rec["lm_eval_loss"], rec["tokens_per_second"],
                              rec.get("error"))
            report.cells[(cell.r_ms, cell.k)] = cell
        return report

    def render_table(self) -> str:
        """Plain-text table: one row per resolution, one column group per metric."""
        ks = sorted({k for (_, k) in self.cells})
        rs = sorted({r for (r, _) in self.cells})
        groups = [("snr dB", lambda c: f"{c.snr_db_mean:6.2f}"),
                  ("codec loss", lambda c: f"{c.codec_final_loss:7.3f}"),
                  ("lm loss", lambda c: "   --  " if c.lm_eval_loss is None
                   else f"{c.lm_eval_loss:7.3f}")]
        width = 8
        lines = []
        head1 = "      "
        head2 = "r_ms  "
        for title, _ in groups:
            head1 += f"| {title:^{width * len(ks)}} "
            head2 += "| " + " ".join(f"K={k:<{width - 3}}" for k in ks) + " "
        lines.append(head1)
        lines.append(head2)
        lines.append("-" * len(head2))
        for r in rs:
            row = f"{r:<6}"
            for _, fmt in groups:
                cells = []
                for k in ks:
                    c = self.cells.get((r, k))
                    cells.append("  err  " if c is None or c.error else fmt(c))
                row += "| " + " ".join(f"{v:<{width - 1}}" for v in cells) + " "
            lines.append(row)
        return "\n".join(lines)


def run_ablation(manifest: DatasetManifest, r_ms_values=GRID_R_MS,
                 k_values=GRID_CODEBOOK_SIZES,
                 budgets: Optional[AblationBudgets] = None, seed: int = 0,
                 out_dir=None, progress=None) -> AblationReport:
    """Train one codec per (R, K) cell on shared data and seeds; report SNR.

    Cell failures are recorded in the cell instead of aborting the grid.
    tokens_per_second is the deterministic unit rate of the representation.
    """
    budgets = budgets or AblationBudgets()
    eval_entries = manifest.split("eval")[: budgets.eval_clips]
    if not eval_entries:
        raise EvalError("manifest has no eval split")
    eval_waves = [read_wav(e.path) for e in eval_entries]
    report = AblationReport(metadata={
        "seed": seed, "codec_steps": budgets.codec_steps,
        "eval_clips": len(eval_waves), "lm_cells": budgets.train_lm_cells,
        "started_unix": int(time.time())})
    out_dir = Path(out_dir) if out_dir is not None else None

    for r_ms in sorted(r_ms_values):
        for k in sorted(k_values):
            cell = CellResult(r_ms=r_ms, k=k,
                              tokens_per_second=1000.0 / r_ms)
            report.cells[(r_ms, k)] = cell
            try:
                cfg = grid_config(r_ms, k,
                                  base_channels=budgets.base_channels,
                                  latent_dim=budgets.latent_dim)
                train_cfg = CodecTrainConfig(
                    steps=budgets.codec_steps, batch_size=budgets.codec_batch,
                    crop_samples=budgets.crop_samples, lr=budgets.codec_lr,
                    warmup_steps=budgets.codec_warmup)
                ckpt = (out_dir / f"codec_r{r_ms}_k{k}.ckpt") if out_dir else None
                result = train_codec(manifest, cfg, train_cfg, seed, ckpt)
                _, cell.codec_final_loss = result.smoothed(train_cfg.smooth_window)
                snrs = [reconstruction_snr(w, reconstruct(w, result.codec))
                        for w in eval_waves]
                cell.snr_db_mean = float(np.mean(snrs))
                cell.snr_db_std = float(np.std(snrs))
                if budgets.train_lm_cells:
                    corpus = tokenize_corpus(manifest, result.codec)
                    lm_cfg = desk_config(k, max_seq_len=budgets.lm_max_seq_len)
                    lm_tc = LmTrainConfig(steps=budgets.lm_steps,
                                          batch_size=budgets.lm_batch,
                                          lr=budgets.lm_lr)
                    lm_res = train_lm(corpus, lm_cfg, lm_tc, seed)
                    cell.lm_eval_loss = lm_res.eval_history[-1]["loss"] \
                        if lm_res.eval_history else None
            except Exception as e:  # noqa: BLE001 - cell isolation is the contract
                cell.error = f"{type(e).__name__}: {e}"
            if progress is not None:
                progress(cell)
    if out_dir is not None:
        report.to_jsonl(out_dir / "ablation.jsonl")
        (out_dir / "ablation.txt").write_text(report.render_table() + "\n")
    return report


# ---------------------------------------------------------------------------
# listening-test clip assembly

BEEP_FREQ_HZ = 1000.0
BEEP_DURATION_S = 0.3
BEEP_AMPLITUDE = 0.5
BEEP_FADE_S = 0.010


def make_beep(sample_rate: int) -> np.ndarray:
    n = int(round(BEEP_DURATION_S * sample_rate))
    t = np.arange(n, dtype=np.float64) / sample_rate
    beep = BEEP_AMPLITUDE * np.sin(2.0 * np.pi * BEEP_FREQ_HZ * t)
    fade = int(round(BEEP_FADE_S * sample_rate))
    if fade > 0:
        ramp = np.linspace(0.0, 1.0, fade, endpoint=False)
        beep[:fade] *= ramp
        beep[-fade:] *= ramp[::-1]
    return beep.astype(np.float32)


def assemble_cmos_clip(prompt: Waveform, continuation: Waveform) -> Waveform:
    """prompt ++ beep ++ continuation, the paired-halves rating layout."""
    if prompt.sample_rate != continuation.sample_rate:
        raise EvalError(
            f"sample-rate mismatch: {prompt.sample_rate} vs "
            f"{continuation.sample_rate}")
    beep = make_beep(prompt.sample_rate)
    return Waveform(np.concatenate([prompt.samples, beep, continuation.samples]),
                    prompt.sample_rate)
