"""End-to-end optimization loop, checkpointing, and ablation grids.

One step: sample a mini-batch, embed all utterances in lockstep, build the
stacked score blocks through the scoring head, take the batch loss, run
backward, clip the global gradient norm, and apply SGD to every trainable
tensor (affine scale/offset included). Determinism: parameter init and the
batch stream derive from the config seed, the batch stream's generator
state rides along in checkpoints, and evaluation never consumes it, so a
resumed run reproduces a continuous one bit for bit.

Checkpoint file (``.drv``): magic ``DRV1``, u32 manifest byte length, JSON
manifest (space-padded to a 4-byte boundary) with the tensor table
[{name, shape, dtype:"f32", byte_offset}] plus the config echo, step
counter and RNG state, then the concatenated little-endian float32 blobs.
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from .artifacts import build_version, write_atomic
from .autodiff import Tape, backward
from .config import TrainConfig
from .errors import (CheckpointMismatchError, DataError, FormatError,
                     TrainingError)
from .evaluate import EvalReport, evaluate_model
from .head import SwitchConfig
from .embedder import embed_batch
from .losses import batch_loss, build_batch_scores_fast, sample_minibatch
from .model import DrVectorModel
from .synth import build_trials, stream
from .trials import TrialSet

CKPT_MAGIC = b"DRV1"


@dataclass
class TraceRow:
    step: int
    loss: float
    eers: dict | None = None  # condition -> EER, present on evaluation steps


@dataclass
class Checkpoint:
    config: TrainConfig
    step: int
    tensors: dict  # name -> float32 ndarray
    rng_state: dict | None = None


@dataclass
class TrainState:
    model: DrVectorModel
    config: TrainConfig
    corpus: object
    rng: np.random.Generator
    step: int = 0


@dataclass
class TrainResult:
    final: Checkpoint
    best: Checkpoint
    best_eer: float
    trace: list
    report: EvalReport  # evaluation of the final parameters
    trials: TrialSet


# ---------------------------------------------------------------------------
# single optimization step

def train_step(state: TrainState, batch) -> float:
    """Run one forward/backward/update cycle on a sampled batch; returns the
    scalar loss. Aborts with TrainingError on a non-finite loss."""
    speakers, utts = batch
    spec = state.config.batch
    feature_seqs = []
    utt_ids = []
    for sid in speakers:
        utt_ids.append(list(utts[sid]))
        for uid in utts[sid]:
            feature_seqs.append(state.corpus.features(uid))

    trainable = state.model.trainable_tensors()
    for _, t in trainable:
        t.zero_grad()

    model = state.model
    with Tape() as tape:
        emb_matrix = embed_batch(model.config.embedder, model.embedder, feature_seqs)
        matrix = build_batch_scores_fast(emb_matrix, spec, model.config.switches,
                                         model.dnn, model.affine,
                                         speaker_ids=speakers, utt_ids=utt_ids)
        loss = batch_loss(matrix, state.config.loss)
        loss_value = loss.item()
        if not math.isfinite(loss_value):
            raise TrainingError(f"non-finite loss ({loss_value}) at step {state.step}")
        backward(tape, loss)

    # global-norm clipping, then plain SGD
    sq_norm = 0.0
    for _, t in trainable:
        if t.grad is not None:
            sq_norm += float(np.sum(np.asarray(t.grad, dtype=np.float64) ** 2))
    norm = math.sqrt(sq_norm)
    scale = state.config.clip_norm / norm if norm > state.config.clip_norm else 1.0
    lr = state.config.learning_rate
    for _, t in trainable:
        if t.grad is not None:
            t.data -= (lr * scale) * t.grad
        t.zero_grad()

    state.step += 1
    return loss_value


# ---------------------------------------------------------------------------
# training loop

def default_eval_trials(config: TrainConfig, corpus) -> TrialSet:
    """Held-out trial set over the eval split; derived from the corpus seed
    so it is independent of the training stream."""
    return build_trials(corpus, config.eval_n_enroll, config.eval_n_target,
                        config.eval_n_nontarget, stream(corpus.seed, "eval-trials"))


def _snapshot(model: DrVectorModel, config: TrainConfig, step: int,
              rng: np.random.Generator) -> Checkpoint:
    tensors = {name: np.array(t.data, dtype=np.float32, copy=True)
               for name, t in model.named_tensors()}
    state = json.loads(json.dumps(rng.bit_generator.state))  # deep, JSON-safe copy
    return Checkpoint(config, step, tensors, state)


def run_training(config: TrainConfig, corpus, out_dir=None,
                 resume_from: Checkpoint | None = None,
                 trials: TrialSet | None = None) -> TrainResult:
    """Train for ``config.steps`` total steps (continuing from a checkpoint
    when given), evaluating on held-out trials every ``eval_every`` steps
    and tracking the best average EER."""
    if trials is None:
        trials = default_eval_trials(config, corpus)

    if resume_from is not None:
        # steps may legitimately grow on resume; everything else must match
        ours = {k: v for k, v in config.to_dict().items() if k != "steps"}
        theirs = {k: v for k, v in resume_from.config.to_dict().items() if k != "steps"}
        if ours != theirs:
            raise CheckpointMismatchError("resume checkpoint was trained under a different config")
        model = restore_model(resume_from)
        rng = np.random.Generator(np.random.PCG64())
        rng.bit_generator.state = resume_from.rng_state
        start_step = resume_from.step
    else:
        model = DrVectorModel.init(config.model_config(), config.seed)
        rng = stream(config.seed, "batches")
        start_step = 0

    state = TrainState(model, config, corpus, rng, step=start_step)
    trace = []
    best: Checkpoint | None = None
    best_eer = math.inf

    for _ in range(start_step, config.steps):
        batch = sample_minibatch(corpus, config.batch, state.rng)
        loss_value = train_step(state, batch)
        row = TraceRow(state.step, loss_value)
        if state.step % config.eval_every == 0 or state.step == config.steps:
            report = evaluate_model(model, trials, corpus, config_echo=model.config_echo(),
                                    with_det=False, batched=True)
            row.eers = {c.condition: c.eer for c in report.conditions}
            if report.average_eer < best_eer:
                best_eer = report.average_eer
                best = _snapshot(model, config, state.step, state.rng)
        trace.append(row)

    final = _snapshot(model, config, state.step, state.rng)
    if best is None:
        best, best_eer = final, math.nan
    report = evaluate_model(model, trials, corpus, config_echo=model.config_echo())

    if out_dir is not None:
        from pathlib import Path
        out = Path(out_dir)
        write_atomic(out / "checkpoint.drv", checkpoint_bytes(final))
        write_atomic(out / "best.drv", checkpoint_bytes(best))
        write_atomic(out / "trace.csv", trace_csv(trace, config))
        payload = report.to_dict()
        payload["version"] = build_version()
        payload["train_config"] = config.to_dict()
        write_atomic(out / "final_eval.json", json.dumps(payload, indent=2, sort_keys=True) + "\n")
    return TrainResult(final, best, best_eer, trace, report, trials)


def trace_csv(trace, config: TrainConfig) -> str:
    """Metric trace; header row is ``step,loss,eer_clean,eer_noisy`` after
    the leading '#' metadata lines."""
    lines = [f"# version={build_version()}",
             f"# config={json.dumps(config.to_dict(), sort_keys=True)}",
             "step,loss,eer_clean,eer_noisy"]
    for row in trace:
        eers = row.eers or {}
        clean = repr(eers["clean"]) if "clean" in eers else ""
        noisy = repr(eers["noisy"]) if "noisy" in eers else ""
        lines.append(f"{row.step},{row.loss!r},{clean},{noisy}")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# checkpoint serialization

def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    entries = []
    blobs = []
    offset = 0
    for name, arr in ckpt.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape),
                        "dtype": "f32", "byte_offset": offset})
        blobs.append(data)
        offset += len(data)
    manifest = {
        "format": "DRV1",
        "version": build_version(),
        "step": ckpt.step,
        "config": ckpt.config.to_dict(),
        "rng_state": ckpt.rng_state,
        "tensors": entries,
    }
    payload = json.dumps(manifest, sort_keys=True).encode("utf-8")
    if len(payload) % 4:  # keep the blob section 4-byte aligned
        payload += b" " * (4 - len(payload) % 4)
    return CKPT_MAGIC + struct.pack("<I", len(payload)) + payload + b"".join(blobs)


def parse_checkpoint(data: bytes) -> Checkpoint:
    if len(data) < 8 or data[:4] != CKPT_MAGIC:
        raise FormatError("checkpoint: missing DRV1 magic")
    (manifest_len,) = struct.unpack_from("<I", data, 4)
    if 8 + manifest_len > len(data):
        raise FormatError("checkpoint: manifest length exceeds file (truncated)")
    try:
        manifest = json.loads(data[8:8 + manifest_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"checkpoint: manifest is not valid JSON ({exc})") from exc
    blob = data[8 + manifest_len:]
    tensors = {}
    for entry in manifest["tensors"]:
        if entry.get("dtype") != "f32":
            raise FormatError(f"checkpoint tensor {entry.get('name')!r}: unsupported dtype")
        count = int(np.prod(entry["shape"])) if entry["shape"] else 1
        start = entry["byte_offset"]
        end = start + 4 * count
        if end > len(blob):
            raise FormatError(f"checkpoint tensor {entry['name']!r}: blob truncated")
        arr = np.frombuffer(blob[start:end], dtype="<f4").reshape(entry["shape"]).copy()
        tensors[entry["name"]] = arr
    config = TrainConfig.from_dict(manifest["config"])
    return Checkpoint(config, manifest["step"], tensors, manifest.get("rng_state"))


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    write_atomic(path, checkpoint_bytes(ckpt))


def load_checkpoint(path) -> Checkpoint:
    with open(path, "rb") as handle:
        return parse_checkpoint(handle.read())


def restore_model(ckpt: Checkpoint) -> DrVectorModel:
    """Rebuild a model and overwrite its tensors with checkpoint values."""
    model = DrVectorModel.init(ckpt.config.model_config(), ckpt.config.seed)
    named = dict(model.named_tensors())
    if set(named) != set(ckpt.tensors):
        missing = sorted(set(named) ^ set(ckpt.tensors))
        raise CheckpointMismatchError(f"checkpoint/config tensor sets differ: {missing}")
    for name, tensor in named.items():
        stored = ckpt.tensors[name]
        if tuple(stored.shape) != tensor.shape:
            raise CheckpointMismatchError(
                f"checkpoint tensor {name!r} has shape {tuple(stored.shape)}, "
                f"config implies {tensor.shape}")
        tensor.data[...] = stored
    return model


# ---------------------------------------------------------------------------
# ablation grids

@dataclass
class GridCell:
    label: str
    config: TrainConfig
    report: EvalReport | None = None
    error: str | None = None


def best_cosine_dims(embedding_dim: int) -> int:
    """The strongest partial-cosine setting: 200 of 256 at full size,
    scaled to 24 of 32 at the desk preset."""
    if embedding_dim == 256:
        return 200
    return max(1, round(embedding_dim * 0.75))


def switch_axis_cells(base: TrainConfig) -> list:
    """The five switch rows; the cosine-only row uses every embedding dim,
    the rest use the strongest partial setting."""
    emb = base.embedder.embedding_dim
    d_best = best_cosine_dims(emb)
    rows = [
        (True, False, False, emb),
        (False, False, True, d_best),
        (False, True, True, d_best),
        (True, False, True, d_best),
        (True, True, True, d_best),
    ]
    cells = []
    for a, b, c, d in rows:
        sw = SwitchConfig(A=a, B=b, C=c, d=d)
        cells.append(GridCell(sw.label(), base.replace(switches=sw)))
    return cells


def loss_axis_cells(base: TrainConfig) -> list:
    """Loss comparison under cosine-only scoring over all dims."""
    sw = SwitchConfig(A=True, B=False, C=False, d=base.embedder.embedding_dim)
    return [GridCell(loss, base.replace(loss=loss, switches=sw))
            for loss in ("ecw_bce", "ge2e_softmax", "ge2e_xs")]


def dterms_axis_cells(base: TrainConfig) -> list:
    """Cosine-dimension sweep with the full head; d = 0 drops the cosine
    paths entirely (decision network only), mirroring the "none" row."""
    emb = base.embedder.embedding_dim
    cells = []
    for d in (0, emb // 2, best_cosine_dims(emb), emb):
        if d == 0:
            sw = SwitchConfig(A=False, B=False, C=True, d=0)
        else:
            sw = SwitchConfig(A=True, B=True, C=True, d=d)
        cells.append(GridCell(f"d={d}", base.replace(switches=sw)))
    return cells


_AXES = {
    "loss": loss_axis_cells,
    "switches": switch_axis_cells,
    "dterms": dterms_axis_cells,
}


def ablation_grid(base: TrainConfig, axis: str, corpus,
                  trials: TrialSet | None = None) -> list:
    """Train every cell of one ablation axis on a shared corpus and seed;
    per-cell failures are recorded, not raised."""
    if axis not in _AXES:
        raise DataError(f"unknown ablation axis {axis!r}; expected one of {sorted(_AXES)}")
    cells = _AXES[axis](base)
    for cell in cells:
        try:
            result = run_training(cell.config, corpus, trials=trials)
            cell.report = result.report
        except Exception as exc:  # record and continue with remaining cells
            cell.error = f"{type(exc).__name__}: {exc}"
    return cells


def grid_csv(cells, axis: str, base_config: TrainConfig | None = None) -> str:
    lines = [f"# version={build_version()}", f"# axis={axis}"]
    if base_config is not None:
        lines.append(f"# config={json.dumps(base_config.to_dict(), sort_keys=True)}")
    lines.append("cell,loss,switches,d,eer_clean,eer_noisy,average_eer,error")
    for cell in cells:
        sw = cell.config.switches
        sw_text = f"A={'ON' if sw.A else 'OFF'} B={'ON' if sw.B else 'OFF'} C={'ON' if sw.C else 'OFF'}"
        if cell.report is not None:
            by_cond = {c.condition: c.eer for c in cell.report.conditions}
            clean = repr(by_cond.get("clean", "")) if "clean" in by_cond else ""
            noisy = repr(by_cond.get("noisy", "")) if "noisy" in by_cond else ""
            lines.append(f"{cell.label},{cell.config.loss},{sw_text},{sw.d},"
                         f"{clean},{noisy},{cell.report.average_eer!r},")
        else:
            lines.append(f"{cell.label},{cell.config.loss},{sw_text},{sw.d},,,,{cell.error}")
    return "\n".join(lines) + "\n"
