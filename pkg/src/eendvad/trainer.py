"""Two-phase training: baseline EEND-EDA, then the same run with the VAD attention loss.

Phase 2 is a continuation of phase 1 (same step counter, optimizer moments
and shuffling stream), differing only in the VAD weight. Per-epoch shuffles
come from ``default_rng([seed, epoch])`` so a resumed run replays the exact
batches an uninterrupted run would have seen.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import losses as L
from .frontend import load_features
from .model import EendEda, ModelConfig, load_checkpoint, save_checkpoint
from .numerics import NumericError, Tape, Tensor
from .scoring import read_rttm
from .simulate import read_manifest, segments_to_activity

log = logging.getLogger(__name__)

BETA1, BETA2, ADAM_EPS = 0.9, 0.999, 1e-8
LOG_COLUMNS = ("step", "phase", "epoch", "lr", "diar", "vad", "exist", "total", "trace", "heads")


@dataclass
class TrainConfig:
    batch_size: int = 8
    epochs_phase1: int = 20
    epochs_phase2: int = 20
    warmup_steps: int = 200
    alpha: float = L.ALPHA_PROSE
    beta: float = 1.0
    seed: int = 0
    fixed_lr: float | None = None
    phase2_lr: float | None = 1e-5  # constant lr once the VAD loss is on; None keeps the schedule
    grad_clip: float = 5.0
    snapshot_every: int = 0  # epochs between snapshot checkpoints; 0 disables

    def validate(self):
        counts = (self.batch_size, self.epochs_phase1, self.epochs_phase2, self.warmup_steps)
        if min(counts) < 1:
            raise ValueError("batch size, epoch counts and warmup must all be >= 1")
        if self.alpha < 0 or self.beta < 0:
            raise ValueError("loss weights must be non-negative")
        for lr in (self.fixed_lr, self.phase2_lr):
            if lr is not None and lr <= 0:
                raise ValueError("fixed learning rates must be positive")


def noam_lr(step: int, d_model: int, warmup: int) -> float:
    if step < 1:
        raise ValueError("Noam schedule is defined for step >= 1")
    return d_model ** -0.5 * min(step ** -0.5, step * warmup ** -1.5)


def adam_step(params: dict, grads: dict, m: dict, v: dict, step: int, lr: float):
    """One bias-corrected Adam update; returns new ``(params, m, v)`` dicts."""
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise NumericError(f"non-finite gradient for {k}")
    new_p, new_m, new_v = {}, {}, {}
    for k, p in params.items():
        g = grads[k]
        new_m[k] = BETA1 * m[k] + (1.0 - BETA1) * g
        new_v[k] = BETA2 * v[k] + (1.0 - BETA2) * g * g
        m_hat = new_m[k] / (1.0 - BETA1 ** step)
        v_hat = new_v[k] / (1.0 - BETA2 ** step)
        new_p[k] = p - lr * m_hat / (np.sqrt(v_hat) + ADAM_EPS)
    return new_p, new_m, new_v


def clip_global_norm(grads: dict, max_norm: float) -> tuple[dict, float]:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if max_norm and norm > max_norm:
        scale = max_norm / norm
        return {k: g * scale for k, g in grads.items()}, norm
    return grads, norm


def chunk_loss(model: EendEda, params: dict[str, Tensor], feats, labels,
               alpha: float, beta: float) -> L.LossBreakdown:
    """Full objective for one chunk: diar + alpha * vad + beta * exist."""
    cfg = model.config
    labels = np.asarray(labels)
    res = model.forward(feats, params, record_attention=True)
    diar, perm = L.pit_diar_loss(labels, res.posteriors)
    exist = L.existence_loss(res.attractors.existence_logits, cfg.n_speakers)
    layer = res.attention[cfg.attention_layer]
    selected = L.select_heads_by_trace(layer, cfg.n_speakers)
    masks = [L.target_mask(labels[perm[c]]) for c in range(cfg.n_speakers)]
    heads = [layer[h] for h, _ in selected]
    if alpha == 0:
        # keep the auxiliary term off the tape: no gradient path at all
        heads = [Tensor(w.data) for w in heads]
    vad, _ = L.vad_aux_loss(masks, heads)
    return L.total_loss(diar, vad, exist, alpha, beta, best_perm=perm, selected_heads=selected)


def split_chunks(feats: np.ndarray, labels: np.ndarray, chunk_len: int):
    return [(feats[s:s + chunk_len], labels[:, s:s + chunk_len])
            for s in range(0, feats.shape[0], chunk_len)]


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    batch: int = 0  # batches already consumed in the current epoch
    skipped: int = 0
    max_lr: float = 0.0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)


class Trainer:
    def __init__(self, model: EendEda, data, cfg: TrainConfig, log_path=None,
                 out_dir=None, state: TrainState | None = None):
        cfg.validate()
        if not data:
            raise ValueError("no training data")
        self.model = model
        self.cfg = cfg
        self.chunks = [c for feats, labels in data for c in split_chunks(feats, labels, model.config.chunk_len)]
        self.state = state or TrainState(
            m={k: np.zeros_like(p) for k, p in model.params.items()},
            v={k: np.zeros_like(p) for k, p in model.params.items()})
        self.log_path = Path(log_path) if log_path else None
        self.out_dir = Path(out_dir) if out_dir else None
        self.history: list[dict] = []
        if self.log_path and not self.log_path.exists():
            self.log_path.write_text("\t".join(LOG_COLUMNS) + "\n")

    def lr(self, step: int, phase: int = 1) -> float:
        if phase == 2 and self.cfg.phase2_lr is not None:
            return self.cfg.phase2_lr
        if self.cfg.fixed_lr is not None:
            return self.cfg.fixed_lr
        return noam_lr(step, self.model.config.d_model, self.cfg.warmup_steps)

    def epoch_order(self, epoch: int) -> list[list[int]]:
        order = np.random.default_rng([self.cfg.seed, epoch]).permutation(len(self.chunks))
        bs = self.cfg.batch_size
        return [order[i:i + bs].tolist() for i in range(0, len(order), bs)]

    def batch_loss(self, batch: list[int], alpha: float, tape: Tape | None = None):
        params = self.model.watch(tape) if tape is not None else self.model.constants()
        parts = [chunk_loss(self.model, params, *self.chunks[i], alpha, self.cfg.beta) for i in batch]
        total = parts[0].total
        for p in parts[1:]:
            total = total + p.total
        return total * (1.0 / len(parts)), parts

    def step(self, batch: list[int], phase: int, alpha: float) -> dict | None:
        st = self.state
        tape = Tape()
        try:
            loss, parts = self.batch_loss(batch, alpha, tape)
            grads = tape.backward(loss)
            grads, _ = clip_global_norm(grads, self.cfg.grad_clip)
            lr = self.lr(st.step + 1, phase)
            self.model.params, st.m, st.v = adam_step(self.model.params, grads, st.m, st.v, st.step + 1, lr)
        except NumericError as err:
            st.skipped += 1
            log.warning("step %d skipped: %s", st.step + 1, err)
            return None
        st.step += 1
        st.max_lr = max(st.max_lr, lr)
        n = len(parts)
        row = {
            "step": st.step, "phase": phase, "epoch": st.epoch, "lr": lr,
            "diar": sum(p.diar.item() for p in parts) / n,
            "vad": sum(p.vad.item() for p in parts) / n,
            "exist": sum(p.exist.item() for p in parts) / n,
            "total": loss.item(),
            "trace": sum(t for p in parts for _, t in p.selected_heads) / sum(len(p.selected_heads) for p in parts),
            "heads": ";".join(",".join(str(h) for h, _ in p.selected_heads) for p in parts),
        }
        self.history.append(row)
        if self.log_path:
            with open(self.log_path, "a") as f:
                f.write("\t".join(repr(row[c]) if isinstance(row[c], float) else str(row[c])
                                  for c in LOG_COLUMNS) + "\n")
        return row

    def run(self, phase: int, until_epoch: int, alpha: float, stop_after_steps: int | None = None):
        """Train until ``state.epoch == until_epoch`` (or ``stop_after_steps`` more steps)."""
        st = self.state
        taken = 0
        while st.epoch < until_epoch:
            batches = self.epoch_order(st.epoch)
            finite_any = False
            while st.batch < len(batches):
                if stop_after_steps is not None and taken >= stop_after_steps:
                    return
                row = self.step(batches[st.batch], phase, alpha)
                finite_any |= row is not None
                st.batch += 1
                taken += 1
            if not finite_any:
                raise NumericError(f"every step of epoch {st.epoch} produced non-finite values")
            st.epoch += 1
            st.batch = 0
            if self.out_dir and self.cfg.snapshot_every and st.epoch % self.cfg.snapshot_every == 0:
                self.save(self.out_dir / f"snapshot_ep{st.epoch}.ckpt", phase)

    def save(self, path, phase: int) -> None:
        st = self.state
        meta = {"step": st.step, "epoch": st.epoch, "batch": st.batch, "skipped": st.skipped,
                "max_lr": st.max_lr, "phase": phase, "train_config": asdict(self.cfg)}
        blocks = {f"adam_m.{k}": a for k, a in st.m.items()}
        blocks.update({f"adam_v.{k}": a for k, a in st.v.items()})
        save_checkpoint(path, self.model, meta, blocks)

    @classmethod
    def resume(cls, path, data, cfg: TrainConfig, **kw) -> tuple[Trainer, int]:
        model, meta, blocks = load_checkpoint(path)
        state = TrainState(step=meta["step"], epoch=meta["epoch"], batch=meta["batch"],
                           skipped=meta["skipped"], max_lr=meta["max_lr"],
                           m={k[7:]: a for k, a in blocks.items() if k.startswith("adam_m.")},
                           v={k[7:]: a for k, a in blocks.items() if k.startswith("adam_v.")})
        return cls(model, data, cfg, state=state, **kw), meta["phase"]


def load_dataset(manifest, n_speakers: int = 2):
    """(features, labels) pairs for every manifest entry; labels are C x T at 100 ms."""
    data = []
    for entry in read_manifest(manifest):
        feats = load_features(entry.audio)
        segs = [s for s in read_rttm(entry.rttm) if s.recording == entry.recording]
        speakers = sorted({s.speaker for s in segs})
        if len(speakers) > n_speakers:
            raise ValueError(f"{entry.recording}: {len(speakers)} speakers, model handles {n_speakers}")
        speakers += [f"<none{i}>" for i in range(n_speakers - len(speakers))]
        data.append((feats, segments_to_activity(segs, speakers, feats.shape[0])))
    return data


def train(data, model_cfg: ModelConfig, cfg: TrainConfig, out_dir, phases=(1, 2),
          resume_from=None) -> Trainer:
    """Run the requested phases, writing ``train.log`` and per-phase checkpoints.

    ``data`` is a manifest path or a list of ``(features, labels)`` pairs.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if not isinstance(data, list):
        data = load_dataset(data, model_cfg.n_speakers)
    log_path = out / "train.log"
    if resume_from is not None:
        trainer, _ = Trainer.resume(resume_from, data, cfg, log_path=log_path, out_dir=out)
    else:
        trainer = Trainer(EendEda(model_cfg, seed=cfg.seed), data, cfg, log_path=log_path, out_dir=out)
    end1 = cfg.epochs_phase1
    if 1 in phases:
        trainer.run(1, end1, 0.0)
        trainer.save(out / "phase1.ckpt", 1)
    if 2 in phases:
        if 1 in phases and resume_from is None:
            trainer, _ = Trainer.resume(out / "phase1.ckpt", data, cfg, log_path=log_path, out_dir=out)
        trainer.state.epoch = max(trainer.state.epoch, end1)
        trainer.run(2, end1 + cfg.epochs_phase2, cfg.alpha)
        trainer.save(out / "phase2.ckpt", 2)
    log.info("max learning rate reached: %.6g", trainer.state.max_lr)
    return trainer
