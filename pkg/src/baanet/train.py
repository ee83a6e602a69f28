"""Seeded training loop, batched inference, and checkpoint-driven evaluation.

Training is single-threaded over batches and fully deterministic: the shuffle
stream, parameter init, and synthetic data all derive from the run seed, so a
repeated run writes byte-identical metrics and checkpoints. Inference may fan
out over batches with a small thread pool (results are ordered by image, so
parallelism never changes the output).
"""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import evaluator as E
from . import fileio
from . import model as M
from . import tensor as T
from .config import RunConfig
from .synthdata import Dataset, SampleRecord

__all__ = [
    "METRIC_COLUMNS",
    "TrainOutcome",
    "train_model",
    "model_from_checkpoint",
    "run_inference",
    "evaluate_model",
]

METRIC_COLUMNS = (
    "epoch",
    "loss_illum",
    "loss_cls1",
    "loss_cls2",
    "loss_reg1",
    "loss_reg2",
    "loss_total",
)


@dataclasses.dataclass
class TrainOutcome:
    net: M.BAANet
    checkpoint_path: Path
    metrics_path: Path
    epoch_rows: list[dict[str, float]]


def _preload(dataset: Dataset, records: list[SampleRecord]):
    rgb = np.stack([dataset.load_pair(r)[0] for r in records])
    tir = np.stack([dataset.load_pair(r)[1] for r in records])
    gts = [r.ground_truths for r in records]
    labels = [r.illumination for r in records]
    return rgb, tir, gts, labels


def train_model(run_cfg: RunConfig, dataset: Dataset, out_dir, quiet: bool = False) -> TrainOutcome:
    """Train one model on the dataset's train split and persist the artifacts.

    Writes ``metrics.csv`` (one row of batch-mean loss terms per epoch) and
    ``checkpoint.bin`` under ``out_dir``. A non-finite loss aborts with
    :class:`baanet.tensor.NumericError` naming the offending term.
    """
    records = dataset.entries("train")
    if not records:
        raise ValueError("dataset has no train split")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    rgb_all, tir_all, gts_all, labels_all = _preload(dataset, records)
    n = len(records)
    size = dataset.image_size
    net = M.build_model(
        run_cfg.fusion_mode, run_cfg.model, run_cfg.illum, run_cfg.loss, (size, size), seed=run_cfg.seed
    )
    adam = T.AdamState(lr=run_cfg.learning_rate)
    shuffle_rng = np.random.default_rng(np.random.PCG64(run_cfg.seed))

    rows: list[dict[str, float]] = []
    step = 0
    for epoch in range(1, run_cfg.epochs + 1):
        perm = shuffle_rng.permutation(n)
        sums = dict.fromkeys(METRIC_COLUMNS[1:], 0.0)
        n_batches = 0
        for start in range(0, n, run_cfg.batch_size):
            idx = perm[start : start + run_cfg.batch_size]
            rgb = T.Tensor(rgb_all[idx])
            tir = T.Tensor(tir_all[idx])
            losses = M.compute_losses(
                net, rgb, tir, [gts_all[i] for i in idx], [labels_all[i] for i in idx]
            )
            net.store.zero_grad()
            losses["total"].backward()
            T.adam_step(adam, net.store)
            step += 1
            n_batches += 1
            sums["loss_illum"] += losses["illumination"].item() if losses["illumination"] is not None else 0.0
            sums["loss_cls1"] += losses["cls_stage1"].item()
            sums["loss_cls2"] += losses["cls_stage2"].item()
            sums["loss_reg1"] += losses["reg_stage1"].item()
            sums["loss_reg2"] += losses["reg_stage2"].item()
            sums["loss_total"] += losses["total"].item()
        row = {"epoch": float(epoch), **{k: v / n_batches for k, v in sums.items()}}
        rows.append(row)
        if not quiet:
            print(
                f"epoch {epoch}/{run_cfg.epochs}: total={row['loss_total']:.4f} "
                f"cls1={row['loss_cls1']:.4f} cls2={row['loss_cls2']:.4f} "
                f"reg1={row['loss_reg1']:.4f} reg2={row['loss_reg2']:.4f} "
                f"illum={row['loss_illum']:.4f}"
            )

    metrics_path = out_dir / "metrics.csv"
    lines = [",".join(METRIC_COLUMNS)]
    for row in rows:
        lines.append(",".join([str(int(row["epoch"]))] + [repr(row[c]) for c in METRIC_COLUMNS[1:]]))
    metrics_path.write_text("\n".join(lines) + "\n")

    checkpoint_path = out_dir / "checkpoint.bin"
    fileio.save_checkpoint(checkpoint_path, net.store.export_arrays(), run_cfg.to_text(), step)
    return TrainOutcome(net=net, checkpoint_path=checkpoint_path, metrics_path=metrics_path, epoch_rows=rows)


def model_from_checkpoint(ck: fileio.Checkpoint, image_size: int) -> tuple[M.BAANet, RunConfig]:
    """Rebuild the exact model a checkpoint was trained as and load its weights."""
    run_cfg = RunConfig.from_text(ck.config_text)
    net = M.build_model(
        run_cfg.fusion_mode, run_cfg.model, run_cfg.illum, run_cfg.loss,
        (image_size, image_size), seed=run_cfg.seed,
    )
    net.store.load_arrays(ck.tensors)
    return net, run_cfg


def run_inference(
    net: M.BAANet,
    dataset: Dataset,
    split: str = "test",
    batch_size: int = 8,
    workers: int = 1,
) -> dict[str, list]:
    """Detections per image id over one split; ordering is independent of ``workers``."""
    records = dataset.entries(split)
    chunks = [records[i : i + batch_size] for i in range(0, len(records), batch_size)]

    def infer(chunk):
        rgb = T.Tensor(np.stack([dataset.load_pair(r)[0] for r in chunk]))
        tir = T.Tensor(np.stack([dataset.load_pair(r)[1] for r in chunk]))
        return M.predict(net, rgb, tir)

    if workers > 1 and len(chunks) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            per_chunk = list(pool.map(infer, chunks))
    else:
        per_chunk = [infer(c) for c in chunks]

    out: dict[str, list] = {}
    for chunk, dets in zip(chunks, per_chunk):
        for record, d in zip(chunk, dets):
            out[record.sample_id] = d
    return out


def evaluate_model(
    net: M.BAANet,
    dataset: Dataset,
    eval_cfg,
    split: str = "test",
    batch_size: int = 8,
    workers: int = 1,
):
    """Inference plus subset evaluation; returns (EvalResult, detections by image)."""
    records = dataset.entries(split)
    if not records:
        raise ValueError(f"dataset has no '{split}' split")
    detections = run_inference(net, dataset, split, batch_size, workers)
    images = [
        E.EvalImage(r.sample_id, r.illumination, r.ground_truths, detections[r.sample_id])
        for r in records
    ]
    return E.subset_eval(images, eval_cfg), detections
