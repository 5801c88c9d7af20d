"""Training loop: random fixed-length crops, PIT SI-SDR loss, Adam with clipping."""
from __future__ import annotations

import json
import logging
import math
import os
from dataclasses import dataclass

import numpy as np

from .autodiff import Adam, PlateauHalver, Tape, clip_grad_norm
from .config import RunConfig
from .errors import DataError, NumericalError
from .metrics import pit_loss_tensor, score_example
from .model import SeparationModel
from .room import read_manifest, resolve_entry_paths
from .wav import read_wav

log = logging.getLogger(__name__)


@dataclass
class Example:
    id: str
    mixture: np.ndarray      # [C, T]
    references: np.ndarray   # [S, T]
    angle_diff_deg: float = 0.0


def load_examples(manifest_path) -> list[Example]:
    entries = read_manifest(manifest_path)
    base = os.path.dirname(os.fspath(manifest_path))
    out = []
    for e in entries:
        mix_path, ref_paths = resolve_entry_paths(e, base)
        for p in (mix_path, *ref_paths):
            if not os.path.exists(p):
                raise DataError(f"missing file referenced by manifest: {p}")
        mixture = read_wav(mix_path).samples
        refs = np.stack([read_wav(p).samples[0] for p in ref_paths])
        n = min(mixture.shape[1], refs.shape[1])
        out.append(Example(str(e["id"]), mixture[:, :n], refs[:, :n],
                           float(e.get("angle_diff_deg", 0.0))))
    return out


def step_rng(seed: int, step: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), int(step), 0xC0DE]))


def make_batch(examples, batch_size: int, chunk: int, rng: np.random.Generator):
    """Random crops of ``chunk`` samples; shorter examples are zero-padded.

    Returns ``(mixtures [B, C, chunk], references [B, S, chunk], valid [B])``.
    """
    picks = rng.integers(0, len(examples), size=batch_size)
    channels = examples[0].mixture.shape[0]
    speakers = examples[0].references.shape[0]
    mix = np.zeros((batch_size, channels, chunk))
    refs = np.zeros((batch_size, speakers, chunk))
    valid = np.zeros(batch_size, dtype=int)
    for b, i in enumerate(picks):
        ex = examples[i]
        t = ex.mixture.shape[1]
        if t >= chunk:
            start = int(rng.integers(0, t - chunk + 1))
            mix[b] = ex.mixture[:, start:start + chunk]
            refs[b] = ex.references[:, start:start + chunk]
            valid[b] = chunk
        else:
            mix[b, :, :t] = ex.mixture
            refs[b, :, :t] = ex.references
            valid[b] = t
    return mix, refs, valid


class Trainer:
    def __init__(self, config: RunConfig, examples, dev_examples=None, seed: int | None = None):
        if not examples:
            raise DataError("no training examples")
        self.config = config
        tc = config.training
        self.seed = tc.seed if seed is None else seed
        self.model = SeparationModel(config, seed=self.seed)
        self.examples = examples
        self.dev_examples = dev_examples or []
        self.optimizer = Adam(lr=tc.lr)
        self.plateau = PlateauHalver(self.optimizer, patience=tc.plateau_patience)
        self.step_count = 0
        self.chunk = int(round(tc.chunk_seconds * tc.sample_rate))
        self._window_losses: list[float] = []
        self.probe_si_sdri: float | None = None
        self.best_dev: float = -math.inf

    def loss_on_batch(self, mix, refs, valid):
        out = self.model.forward(mix, training=True)["estimates"]
        t_out = out.shape[-1]
        lengths = np.minimum(valid, t_out)
        if np.all(lengths == t_out):
            loss, _ = pit_loss_tensor(out, refs[:, :, :t_out])
            return loss
        from .autodiff import ops
        parts = []
        for b, n in enumerate(lengths):
            if n < 2:
                continue
            est = ops.getitem(out, (slice(b, b + 1), slice(None), slice(0, int(n))))
            part, _ = pit_loss_tensor(est, refs[b:b + 1, :, :n])
            parts.append(part)
        if not parts:
            raise DataError("batch has no valid samples")
        return ops.mul(ops.sum(ops.stack(parts)), 1.0 / len(parts))

    def step(self) -> dict:
        tc = self.config.training
        rng = step_rng(self.seed, self.step_count)
        mix, refs, valid = make_batch(self.examples, tc.batch_size, self.chunk, rng)
        params = self.model.parameters()
        for p in params:
            p.zero_grad()
        try:
            with Tape() as tape:
                loss = self.loss_on_batch(mix, refs, valid)
        except NumericalError as exc:
            raise NumericalError(f"step {self.step_count + 1}: {exc}") from exc
        value = float(loss.value)
        if not math.isfinite(value):
            raise NumericalError(f"non-finite loss at step {self.step_count + 1}")
        tape.backward(loss)
        grad_norm = clip_grad_norm(params, tc.clip_norm)
        if not math.isfinite(grad_norm):
            raise NumericalError(f"non-finite gradient norm at step {self.step_count + 1}")
        self.optimizer.step(params)
        self.step_count += 1
        self._window_losses.append(value)
        return {"step": self.step_count, "loss": value, "grad_norm": grad_norm,
                "lr": self.optimizer.lr}

    def probe(self) -> float:
        """SI-SDRi (dB) of the first training example, full length, inference mode."""
        ex = self.examples[0]
        est = self.model.separate(ex.mixture)
        score = score_example(ex.id, ex.angle_diff_deg, est, ex.references, ex.mixture[0])
        self.probe_si_sdri = score.si_sdri
        return score.si_sdri

    def dev_score(self) -> float | None:
        if not self.dev_examples:
            return None
        vals = []
        for ex in self.dev_examples:
            est = self.model.separate(ex.mixture)
            s = score_example(ex.id, ex.angle_diff_deg, est, ex.references, ex.mixture[0]).si_sdri
            if math.isfinite(s):
                vals.append(s)
        return float(np.mean(vals)) if vals else None

    def end_of_window(self) -> dict:
        """Plateau bookkeeping; returns what was measured."""
        dev = self.dev_score()
        score = dev if dev is not None else -float(np.mean(self._window_losses or [0.0]))
        halved = self.plateau.update(score)
        self._window_losses = []
        improved = dev is not None and dev > self.best_dev
        if improved:
            self.best_dev = dev
        return {"dev_si_sdri": dev, "lr_halved": halved, "dev_improved": improved}

    def save(self, path) -> None:
        self.model.save(path, extra_arrays=self.optimizer.state_arrays(), extra_header={
            "step": self.step_count,
            "seed": self.seed,
            "optimizer": self.optimizer.state_meta(),
            "plateau": self.plateau.state(),
            "window_losses": self._window_losses,
            "best_dev": None if not math.isfinite(self.best_dev) else self.best_dev,
            "probe": {"id": self.examples[0].id, "si_sdri": self.probe_si_sdri},
        })

    @classmethod
    def resume(cls, path, examples, dev_examples=None) -> "Trainer":
        model, header, arrays = SeparationModel.load(path)
        trainer = cls(model.config, examples, dev_examples, seed=header.get("seed"))
        trainer.model = model
        trainer.optimizer.load_state(header["optimizer"], arrays)
        trainer.plateau.load_state(header.get("plateau", {}))
        trainer.step_count = int(header["step"])
        trainer._window_losses = list(header.get("window_losses", []))
        best = header.get("best_dev")
        trainer.best_dev = -math.inf if best is None else best
        return trainer


def train(config: RunConfig, manifest, out_model, dev_manifest=None, resume=None,
          steps: int | None = None, log_path=None) -> Trainer:
    """Full training run with periodic checkpoints and a JSONL step log."""
    examples = load_examples(manifest)
    dev = load_examples(dev_manifest) if dev_manifest else None
    if resume:
        trainer = Trainer.resume(resume, examples, dev)
    else:
        trainer = Trainer(config, examples, dev)
    tc = trainer.config.training
    total = tc.steps if steps is None else steps
    log_path = log_path or f"{os.fspath(out_model)}.log.jsonl"
    best_path = f"{os.fspath(out_model)}.best"
    mode = "a" if resume else "w"
    with open(log_path, mode) as log_fh:
        while trainer.step_count < total:
            try:
                record = trainer.step()
            except NumericalError:
                log.error("numerical failure at step %d; last checkpoint kept at %s",
                          trainer.step_count + 1, out_model)
                raise
            log_fh.write(json.dumps(record, sort_keys=True) + "\n")
            k = trainer.step_count
            if tc.eval_every and k % tc.eval_every == 0:
                info = trainer.end_of_window()
                if info["dev_improved"]:
                    trainer.probe()
                    trainer.save(best_path)
                log_fh.write(json.dumps({"step": k, "eval": info}, sort_keys=True) + "\n")
            if (tc.checkpoint_every and k % tc.checkpoint_every == 0) or k == total:
                si_sdri = trainer.probe()
                trainer.save(out_model)
                log_fh.write(json.dumps({"step": k, "checkpoint": os.fspath(out_model),
                                         "probe_id": trainer.examples[0].id,
                                         "probe_si_sdri": si_sdri}, sort_keys=True) + "\n")
            log_fh.flush()
    if dev and os.path.exists(best_path):
        log.info("best dev SI-SDRi %.3f dB saved at %s", trainer.best_dev, best_path)
    return trainer
