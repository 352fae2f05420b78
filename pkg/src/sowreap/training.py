"""Teacher-forced training with a coverage penalty, NLL scoring and the epoch loop."""

from __future__ import annotations

import json
import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
from torch.nn.utils.rnn import pad_sequence

from .bpe import BpeVocab
from .model import TransformerModel, load_checkpoint, save_checkpoint

log = logging.getLogger(__name__)


class NumericalError(RuntimeError):
    pass


@dataclass
class Example:
    src: list[int]
    order: list[int]
    tgt: list[int]
    aux: list[int] | None = None


@dataclass
class Batch:
    src: torch.Tensor
    order: torch.Tensor
    src_pad: torch.Tensor
    tgt_in: torch.Tensor
    tgt_out: torch.Tensor
    tgt_mask: torch.Tensor
    aux: torch.Tensor | None = None

    def __len__(self):
        return self.src.shape[0]


def collate(examples: Sequence[Example], pad_id=0, bos_id=1, eos_id=2) -> Batch:
    if not examples:
        raise ValueError("empty batch")
    for e in examples:
        if len(e.order) != len(e.src):
            raise ValueError("order and source lengths differ")

    def pad(seqs, value):
        return pad_sequence([torch.tensor(x, dtype=torch.long) for x in seqs],
                            batch_first=True, padding_value=value)

    src = pad([e.src for e in examples], pad_id)
    order = pad([e.order for e in examples], 0)
    tgt_in = pad([[bos_id] + e.tgt for e in examples], pad_id)
    tgt_out = pad([e.tgt + [eos_id] for e in examples], pad_id)
    aux = pad([e.aux for e in examples], pad_id) if examples[0].aux is not None else None
    lengths = torch.tensor([len(e.tgt) + 1 for e in examples])
    tgt_mask = torch.arange(tgt_in.shape[1])[None, :] < lengths[:, None]
    return Batch(src, order, src == pad_id, tgt_in, tgt_out, tgt_mask, aux)


def coverage_loss(attention, tgt_mask=None):
    """Sum over decode steps of ``sum_i min(a_t[i], c_t[i])`` with ``c_t`` the attention so far.

    ``attention`` is ``(T, S)`` or ``(B, T, S)`` (heads already averaged).
    """
    a = attention if attention.dim() == 3 else attention[None]
    if tgt_mask is not None:
        a = a * tgt_mask[..., None].to(a.dtype)
    cov = torch.cumsum(a, dim=1) - a
    return torch.minimum(a, cov).sum()


def batch_loss(model: TransformerModel, batch: Batch, coverage_coeff: float = 0.0):
    """(total, nll_per_token, coverage_per_token)."""
    logits, cross = model(batch.src, batch.order, batch.tgt_in, batch.src_pad, batch.aux)
    ntok = batch.tgt_mask.sum()
    logp = torch.log_softmax(logits, -1)
    nll = -logp.gather(-1, batch.tgt_out[..., None])[..., 0]
    nll = (nll * batch.tgt_mask).sum() / ntok
    cov = coverage_loss(cross.mean(1), batch.tgt_mask) / ntok
    total = nll + coverage_coeff * cov if coverage_coeff else nll
    return total, nll, cov


def train_step(model: TransformerModel, optimizer, batch: Batch, coverage_coeff: float = 0.0) -> float:
    model.train()
    optimizer.zero_grad()
    loss, nll, cov = batch_loss(model, batch, coverage_coeff)
    if not torch.isfinite(loss):
        raise NumericalError(f"non-finite loss: nll={float(nll.detach())} coverage={float(cov.detach())} "
                             f"batch={len(batch)} coeff={coverage_coeff}")
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def make_optimizer(model, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
    return torch.optim.Adam(model.parameters(), lr=lr, betas=betas, eps=eps)


@torch.no_grad()
def sequence_nll(model: TransformerModel, examples: Sequence[Example]) -> list[float]:
    """Mean negative log-likelihood per target token (eos included), one value per example."""
    if any(len(e.tgt) == 0 for e in examples):
        raise ValueError("empty target")
    model.eval()
    batch = collate(examples)
    logits, _ = model(batch.src, batch.order, batch.tgt_in, batch.src_pad, batch.aux)
    logp = torch.log_softmax(logits.double(), -1)
    nll = -logp.gather(-1, batch.tgt_out[..., None])[..., 0] * batch.tgt_mask
    return (nll.sum(1) / batch.tgt_mask.sum(1)).tolist()


def length_bucketed_batches(examples: Sequence[Example], batch_size: int, rng: np.random.Generator,
                            pool: int = 50) -> list[np.ndarray]:
    """Shuffled batches of similar source length.

    Examples are shuffled, cut into pools of ``pool`` batches, sorted by length
    inside each pool and batched; the batch order is then shuffled again.
    """
    order = rng.permutation(len(examples))
    span = batch_size * pool
    batches = []
    for i in range(0, len(order), span):
        chunk = sorted(order[i:i + span], key=lambda j: len(examples[j].src))
        batches.extend(np.asarray(chunk[k:k + batch_size]) for k in range(0, len(chunk), batch_size))
    return [batches[i] for i in rng.permutation(len(batches))]


def coverage_schedule(epoch: int, schedule=((10, 1.0), (20, 0.5))) -> float:
    """Coefficient for 1-based ``epoch``: 1 for epochs 1-10, 0.5 for 11-20, 0 after."""
    for last_epoch, coeff in schedule:
        if epoch <= last_epoch:
            return coeff
    return 0.0


@dataclass
class TrainConfig:
    lr: float = 1e-4
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 32
    max_epochs: int = 50
    patience: int = 5
    coverage: bool = True
    coverage_schedule: tuple = ((10, 1.0), (20, 0.5))
    seed: int = 0
    max_steps_per_epoch: int | None = None


@dataclass
class EpochLog:
    epoch: int
    coverage_coeff: float
    train_loss: float
    valid_nll: float | None
    steps: int

    def to_json(self) -> str:
        return json.dumps(self.__dict__, sort_keys=True)


class Trainer:
    """Epoch loop with early stopping, per-epoch checkpoints and exact resume.

    All randomness is derived from ``(seed, epoch)`` so that resuming from an
    epoch checkpoint reproduces the uninterrupted run bit for bit.
    """

    def __init__(self, model: TransformerModel, vocab: BpeVocab, config: TrainConfig,
                 out_dir: str | Path | None = None):
        self.model = model
        self.vocab = vocab
        self.config = config
        self.out_dir = Path(out_dir) if out_dir else None
        self.optimizer = make_optimizer(model, config.lr, config.betas, config.eps)
        self.history: list[EpochLog] = []
        self.best = math.inf
        self.bad_epochs = 0
        self.epoch = 0

    def _coeff(self, epoch: int) -> float:
        return coverage_schedule(epoch, self.config.coverage_schedule) if self.config.coverage else 0.0

    def run_epoch(self, train: Sequence[Example], valid: Sequence[Example] | None) -> EpochLog:
        cfg = self.config
        epoch = self.epoch + 1
        torch.manual_seed(cfg.seed * 100003 + epoch)
        batches = length_bucketed_batches(train, cfg.batch_size, np.random.default_rng([cfg.seed, epoch]))
        coeff = self._coeff(epoch)
        losses = []
        for step, idx in enumerate(batches):
            if cfg.max_steps_per_epoch is not None and step >= cfg.max_steps_per_epoch:
                break
            batch = collate([train[j] for j in idx])
            losses.append(train_step(self.model, self.optimizer, batch, coeff))
        valid_nll = None
        if valid:
            valid_nll = float(np.mean(evaluate_nll(self.model, valid, cfg.batch_size)))
        entry = EpochLog(epoch, coeff, float(np.mean(losses)) if losses else float("nan"),
                         valid_nll, len(losses))
        self.epoch = epoch
        self.history.append(entry)
        log.info("epoch %d coverage=%.2f train=%.4f valid=%s", epoch, coeff, entry.train_loss, valid_nll)
        return entry

    def fit(self, train: Sequence[Example], valid: Sequence[Example] | None = None,
            on_epoch: Callable[[EpochLog], None] | None = None,
            stop_after: int | None = None) -> list[EpochLog]:
        """Train until ``max_epochs`` or early stop; ``stop_after`` simulates an interruption."""
        if not train:
            raise ValueError("no training examples")
        while self.epoch < self.config.max_epochs:
            if stop_after is not None and self.epoch >= stop_after:
                break
            entry = self.run_epoch(train, valid)
            metric = entry.valid_nll if entry.valid_nll is not None else entry.train_loss
            if not math.isfinite(metric):
                raise NumericalError(f"epoch {entry.epoch}: non-finite metric {metric}")
            improved = metric < self.best - 1e-9
            if improved:
                self.best = metric
                self.bad_epochs = 0
            else:
                self.bad_epochs += 1
            self._save(entry, improved)
            if on_epoch:
                on_epoch(entry)
            if self.config.patience and self.bad_epochs >= self.config.patience:
                log.info("early stop at epoch %d", entry.epoch)
                break
        return self.history

    def _save(self, entry: EpochLog, improved: bool):
        if self.out_dir is None:
            return
        self.out_dir.mkdir(parents=True, exist_ok=True)
        extra = {"epoch": entry.epoch}
        save_checkpoint(self.out_dir / f"epoch_{entry.epoch:03d}.npz", self.model, self.vocab, extra)
        if improved:
            save_checkpoint(self.out_dir / "best.npz", self.model, self.vocab, extra)
        state = {
            "epoch": self.epoch,
            "best": self.best,
            "bad_epochs": self.bad_epochs,
            "optimizer": self.optimizer.state_dict(),
            "history": [h.__dict__ for h in self.history],
        }
        torch.save(state, self.out_dir / "trainer_state.pt")
        with open(self.out_dir / "train_log.jsonl", "w", encoding="utf-8") as fh:
            for h in self.history:
                fh.write(h.to_json() + "\n")

    @classmethod
    def resume(cls, out_dir: str | Path, config: TrainConfig) -> Trainer:
        out_dir = Path(out_dir)
        state = torch.load(out_dir / "trainer_state.pt", weights_only=False)
        model, vocab, _ = load_checkpoint(out_dir / f"epoch_{state['epoch']:03d}.npz")
        trainer = cls(model, vocab, config, out_dir)
        trainer.optimizer.load_state_dict(state["optimizer"])
        trainer.epoch = state["epoch"]
        trainer.best = state["best"]
        trainer.bad_epochs = state["bad_epochs"]
        trainer.history = [EpochLog(**h) for h in state["history"]]
        return trainer


def evaluate_nll(model: TransformerModel, examples: Sequence[Example], batch_size: int = 64) -> list[float]:
    out = []
    for i in range(0, len(examples), batch_size):
        out.extend(sequence_nll(model, examples[i:i + batch_size]))
    return out
