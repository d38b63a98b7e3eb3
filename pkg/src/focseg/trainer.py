"""Joint labeled/unlabeled training loop, checkpoints and evaluation.

Each iteration draws one labeled and one unlabeled batch. The labeled batch
trains ``E`` and ``D`` through the bootstrapped cross-entropy. The unlabeled
batch is encoded twice: cleanly, giving fixed targets from ``D``, and with
multiplicative noise injected at the perturbation depth, feeding ``G``. The
consistency terms reach ``E`` and ``G`` but never ``D``.
"""
from __future__ import annotations

import csv
import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch

from . import __version__
from .data import PatchDataset
from .geometry import building_length_stats, select_perturbation_depth
from .losses import (
    LossBreakdown,
    LossWeights,
    bootstrapped_ce,
    eta_schedule,
    feature_consistency,
    lambda_schedule,
    output_consistency,
    total_loss,
)
from .metrics import ConfusionCounts, MetricsReport, confusion, report
from .model import EncoderState, ModelConfig, Segmenter

log = logging.getLogger(__name__)

MODES = ("semi", "supervised_only", "output_only_consistency", "no_aux_decoder")
HISTORY_FIELDS = ("iter", "l_s", "l_up", "l_uf", "l_cons", "lambda", "eta", "total")
CHECKPOINT_FORMAT = "focseg-checkpoint/1"


@dataclass
class TrainConfig:
    total_iters: int = 2000
    batch_size: int = 4
    lr: float = 0.1
    momentum: float = 0.9
    perturb_depth: int | str = "auto"
    noise_bound: float = 0.3
    weights: LossWeights = field(default_factory=LossWeights)
    model: ModelConfig = field(default_factory=ModelConfig)
    seed: int = 0
    eval_every: int = 0
    checkpoint_every: int = 0
    mode: str = "semi"

    def __post_init__(self):
        if self.total_iters < 0:
            raise ValueError("total_iters must be nonnegative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.perturb_depth != "auto" and int(self.perturb_depth) < 1:
            raise ValueError("perturb_depth must be 'auto' or a positive integer")
        if self.noise_bound < 0:
            raise ValueError("noise_bound must be nonnegative")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["loss"] = d.pop("weights")
        d["perturb"] = {"depth": d.pop("perturb_depth"), "noise_bound": d.pop("noise_bound")}
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        """Build from a nested JSON-style mapping.

        Sections ``loss``, ``perturb`` and ``model`` are optional; flat keys
        ``perturb_depth`` / ``noise_bound`` / ``weights`` are accepted too.
        Unknown keys raise ``ValueError``.
        """
        d = dict(d)
        d.pop("data", None)  # consumed by the CLI
        loss = dict(d.pop("weights", {}) or {})
        loss.update(d.pop("loss", {}) or {})
        perturb = d.pop("perturb", {}) or {}
        if "depth" in perturb:
            d["perturb_depth"] = perturb["depth"]
        if "noise_bound" in perturb:
            d["noise_bound"] = perturb["noise_bound"]
        model = d.pop("model", {}) or {}
        known = {f for f in cls.__dataclass_fields__} - {"weights", "model"}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(weights=LossWeights(**loss), model=ModelConfig(**model), **d)
        except TypeError as exc:
            raise ValueError(str(exc)) from None


@dataclass
class CheckpointRecord:
    params: dict[str, np.ndarray]
    iteration: int
    config: TrainConfig
    perturb_depth: int | None = None
    loss_history: str | None = None
    run_id: str = ""

    def build_model(self) -> Segmenter:
        model = Segmenter(self.config.model, with_aux=any(k.startswith("G/") for k in self.params))
        own = model.named_group_arrays()
        if set(own) != set(self.params):
            raise ValueError("checkpoint parameters do not match the model layout")
        with torch.no_grad():
            for k, p in own.items():
                if tuple(p.shape) != self.params[k].shape:
                    raise ValueError(f"parameter {k} has shape {self.params[k].shape}, expected {tuple(p.shape)}")
                p.copy_(torch.from_numpy(self.params[k]))
        return model

    def save(self, path) -> Path:
        path = Path(path)
        meta = {
            "format": CHECKPOINT_FORMAT,
            "version": __version__,
            "iteration": self.iteration,
            "config": self.config.to_dict(),
            "perturb_depth": self.perturb_depth,
            "loss_history": self.loss_history,
            "run_id": self.run_id,
        }
        arrays = {f"param:{k}": v for k, v in self.params.items()}
        with open(path, "wb") as fh:
            np.savez(fh, __meta__=np.array(json.dumps(meta)), **arrays)
        return path

    @classmethod
    def load(cls, path) -> "CheckpointRecord":
        with np.load(path, allow_pickle=False) as z:
            meta = json.loads(str(z["__meta__"]))
            if meta.get("format") != CHECKPOINT_FORMAT:
                raise ValueError(f"{path} is not a {CHECKPOINT_FORMAT} file")
            params = {k[len("param:"):]: z[k].copy() for k in z.files if k.startswith("param:")}
        return cls(
            params=params,
            iteration=meta["iteration"],
            config=TrainConfig.from_dict(meta["config"]),
            perturb_depth=meta.get("perturb_depth"),
            loss_history=meta.get("loss_history"),
            run_id=meta.get("run_id", ""),
        )


def snapshot(model: Segmenter) -> dict[str, np.ndarray]:
    return {k: p.detach().cpu().numpy().copy() for k, p in model.named_group_arrays().items()}


class BatchCycler:
    """Endless batches over an index set, reshuffled on every pass."""

    def __init__(self, indices: Sequence[int], batch_size: int, seed):
        self.indices = np.asarray(indices, dtype=np.int64)
        self.batch_size = batch_size
        self.rng = np.random.default_rng(seed)
        self._order = np.zeros(0, dtype=np.int64)
        self._pos = 0

    def __next__(self) -> list[int]:
        if len(self.indices) == 0:
            raise ValueError("cannot draw batches from an empty index set")
        batch = []
        while len(batch) < self.batch_size:
            if self._pos >= len(self._order):
                self._order = self.rng.permutation(self.indices)
                self._pos = 0
            take = self._order[self._pos: self._pos + self.batch_size - len(batch)]
            self._pos += len(take)
            batch.extend(int(i) for i in take)
        return batch

    def __iter__(self):
        return self


def images_tensor(dataset: PatchDataset, idx: Sequence[int], dtype=torch.float32) -> torch.Tensor:
    return torch.from_numpy(np.stack([dataset.image(i) for i in idx])).to(dtype)


def masks_tensor(dataset: PatchDataset, idx: Sequence[int]) -> torch.Tensor:
    return torch.from_numpy(np.stack([dataset.mask(i) for i in idx]).astype(np.int64))


def resolve_perturb_depth(config: TrainConfig, dataset: PatchDataset, labeled: Sequence[int], max_depth: int) -> int:
    """Configured depth, or the one derived from labeled-set building sizes."""
    if config.perturb_depth != "auto":
        depth = int(config.perturb_depth)
        if depth > max_depth:
            raise ValueError(f"perturb_depth {depth} exceeds encoder depth {max_depth}")
        return depth
    stats = building_length_stats((dataset.mask(i) for i in labeled), dataset.resolution)
    return select_perturbation_depth(dataset.resolution, stats, max_depth=max_depth)


@dataclass
class StepOutput:
    loss: torch.Tensor
    breakdown: LossBreakdown
    eta: float
    l_s: torch.Tensor | None = None
    l_cons: torch.Tensor | None = None


def compute_losses(
    model: Segmenter,
    xl: torch.Tensor,
    yl: torch.Tensor,
    xu: torch.Tensor | None,
    t: int,
    config: TrainConfig,
    depth: int,
    noise_seed,
    targets=None,
) -> StepOutput:
    """Assemble the training objective for one iteration.

    ``targets`` optionally overrides the clean-branch ``(probs, taps)`` used as
    consistency targets; gradient checks use it to hold them fixed.
    """
    w = config.weights
    mode = config.mode
    eta = eta_schedule(t, config.total_iters or 1, w)
    lam = lambda_schedule(t, config.total_iters or 1, w)

    state_l = model.encode(xl)
    probs_l = model.decode_main(state_l.z_out, state_l).probs
    l_s, frac = bootstrapped_ce(probs_l, yl, eta, return_fraction=True)

    if mode == "supervised_only" or xu is None:
        bd = total_loss(l_s.item(), 0.0, 0.0, 0.0, w.omega_u, frac)
        return StepOutput(l_s, bd, eta, l_s=l_s)

    prefix = model.E.run(xu, 0, depth)
    if targets is None:
        with torch.no_grad():
            clean = [p.detach() for p in prefix]
            clean_state = EncoderState([xu] + clean + model.E.run(clean[-1], depth))
            main = model.decode_main(clean_state.z_out, clean_state)
            targets = (main.probs, main.taps)
    t_probs, t_taps = targets

    pert = model.encode_with_injection(xu, depth, noise_seed, config.noise_bound, prefix=prefix)
    decode = model.decode_main if mode == "no_aux_decoder" else model.decode_aux
    aux = decode(pert.z_out, pert)

    l_up = output_consistency(t_probs, aux.probs)
    if mode == "output_only_consistency":
        l_uf = l_up.new_zeros(())
    else:
        l_uf = feature_consistency(t_taps, aux.taps)
    l_cons = l_up + w.omega_u * l_uf
    loss = l_s + lam * l_cons
    bd = total_loss(l_s.item(), l_up.item(), l_uf.item(), lam, w.omega_u, frac)
    return StepOutput(loss, bd, eta, l_s=l_s, l_cons=l_cons)


class Trainer:
    """Owns the model, optimizer and data cyclers for one run."""

    def __init__(self, config: TrainConfig, dataset: PatchDataset, split=None):
        self.config = config
        self.dataset = dataset
        self.split = split if split is not None else dataset.split
        if self.split is None:
            raise ValueError("dataset has no labeled/unlabeled split")
        if not self.split.labeled:
            raise ValueError("labeled set is empty")
        torch.manual_seed(config.seed)
        # G is built last so E and D start identical across modes
        self.model = Segmenter(config.model, with_aux=config.mode != "no_aux_decoder")
        self.depth = resolve_perturb_depth(config, dataset, self.split.labeled, self.model.max_depth)
        self.optimizer = torch.optim.SGD(self.model.parameters(), lr=config.lr, momentum=config.momentum)
        self.labeled = BatchCycler(self.split.labeled, config.batch_size, (config.seed, 1))
        self.unlabeled = BatchCycler(self.split.unlabeled, config.batch_size, (config.seed, 2))
        if config.mode != "supervised_only" and not self.split.unlabeled:
            raise ValueError(f"mode {config.mode!r} needs unlabeled data")
        self.iteration = 0

    def next_batches(self):
        lab = next(self.labeled)
        unl = next(self.unlabeled) if len(self.split.unlabeled) else None
        xl = images_tensor(self.dataset, lab)
        yl = masks_tensor(self.dataset, lab)
        xu = images_tensor(self.dataset, unl) if unl is not None and self.config.mode != "supervised_only" else None
        return xl, yl, xu

    def train_step(self, xl, yl, xu, t: int | None = None, hook: Callable | None = None) -> LossBreakdown:
        """One momentum-SGD update; ``hook(step_output)`` may edit the loss before backward."""
        t = self.iteration if t is None else t
        self.model.train()
        self.optimizer.zero_grad(set_to_none=True)
        out = compute_losses(self.model, xl, yl, xu, t, self.config, self.depth, (self.config.seed, t))
        if hook is not None:
            out = hook(out)
        if not math.isfinite(out.breakdown.total) or not torch.isfinite(out.loss):
            raise FloatingPointError(f"non-finite loss at iteration {t}: {out.breakdown}")
        out.loss.backward()
        self.optimizer.step()
        self.iteration = t + 1
        self.last_eta = out.eta
        return out.breakdown

    def checkpoint(self, history: str | None = None, run_id: str = "") -> CheckpointRecord:
        return CheckpointRecord(snapshot(self.model), self.iteration, self.config, self.depth, history, run_id)


def history_row(t: int, bd: LossBreakdown, eta: float) -> dict:
    return {
        "iter": t, "l_s": repr(bd.l_s), "l_up": repr(bd.l_up), "l_uf": repr(bd.l_uf), "l_cons": repr(bd.l_cons),
        "lambda": repr(bd.lambda_t), "eta": repr(eta), "total": repr(bd.total),
    }


def train(
    config: TrainConfig,
    dataset: PatchDataset,
    out_dir=None,
    split=None,
    run_id: str = "run",
    progress: Callable[[int, LossBreakdown], None] | None = None,
) -> CheckpointRecord:
    """Run ``config.total_iters`` iterations and return the final checkpoint.

    With ``out_dir`` set, writes ``loss_history.csv``, ``val_history.csv`` (if
    ``eval_every``), periodic ``checkpoint_<iter>.npz`` and
    ``checkpoint_final.npz``.
    """
    trainer = Trainer(config, dataset, split)
    out = Path(out_dir) if out_dir is not None else None
    hist_path = None
    writer = None
    val_rows = []
    fh = None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        hist_path = out / "loss_history.csv"
        fh = open(hist_path, "w", newline="")
        writer = csv.DictWriter(fh, fieldnames=HISTORY_FIELDS)
        writer.writeheader()
    log.info("mode=%s perturb_depth=%d iters=%d", config.mode, trainer.depth, config.total_iters)
    start = time.perf_counter()
    try:
        for t in range(config.total_iters):
            xl, yl, xu = trainer.next_batches()
            bd = trainer.train_step(xl, yl, xu, t)
            if writer is not None:
                writer.writerow(history_row(t, bd, trainer.last_eta))
            if progress is not None:
                progress(t, bd)
            done = t + 1
            if config.eval_every and trainer.split.val and (done % config.eval_every == 0 or done == config.total_iters):
                _, rep = evaluate_model(trainer.model, dataset, trainer.split.val)
                val_rows.append({"iter": done, "iou": rep.iou, "f1": rep.f1, "elapsed_s": time.perf_counter() - start})
                log.info("iter %d val iou %.4f", done, rep.iou)
            if out is not None and config.checkpoint_every and done % config.checkpoint_every == 0:
                trainer.checkpoint(str(hist_path), run_id).save(out / f"checkpoint_{done:06d}.npz")
    finally:
        if fh is not None:
            fh.close()
    record = trainer.checkpoint(str(hist_path) if hist_path else None, run_id)
    if out is not None:
        record.save(out / "checkpoint_final.npz")
        if val_rows:
            with open(out / "val_history.csv", "w", newline="") as vf:
                w = csv.DictWriter(vf, fieldnames=list(val_rows[0]))
                w.writeheader()
                w.writerows(val_rows)
    return record


@torch.no_grad()
def predict(model: Segmenter, x: torch.Tensor) -> np.ndarray:
    """Main-branch hard labels ``argmax D(E(x))``."""
    model.eval()
    return model(x).argmax(dim=1).numpy().astype(np.uint8)


def evaluate_model(
    model: Segmenter, dataset: PatchDataset, indices: Sequence[int], batch_size: int = 16
) -> tuple[ConfusionCounts, MetricsReport]:
    counts = ConfusionCounts()
    indices = list(indices)
    if not indices:
        raise ValueError("nothing to evaluate")
    for k in range(0, len(indices), batch_size):
        idx = indices[k: k + batch_size]
        x = images_tensor(dataset, idx)
        if x.shape[1] != model.cfg.in_channels:
            raise ValueError(f"data has {x.shape[1]} channels, model expects {model.cfg.in_channels}")
        pred = predict(model, x)
        gt = np.stack([dataset.mask(i) for i in idx])
        counts = counts + confusion(pred, gt)
    return counts, report(counts)


def evaluate(checkpoint, dataset: PatchDataset, split: str = "test") -> tuple[ConfusionCounts, MetricsReport]:
    """Micro-averaged metrics of the main branch on one named split."""
    record = checkpoint if isinstance(checkpoint, CheckpointRecord) else CheckpointRecord.load(checkpoint)
    if dataset.split is None or split not in ("labeled", "unlabeled", "val", "test"):
        raise ValueError(f"split {split!r} not available")
    model = record.build_model()
    return evaluate_model(model, dataset, getattr(dataset.split, split))


def with_mode(config: TrainConfig, mode: str, seed: int | None = None) -> TrainConfig:
    return replace(config, mode=mode, seed=config.seed if seed is None else seed)
